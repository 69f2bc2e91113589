//! Matched designs, design-CSV I/O, and the lattice of stratum tables.
//!
//! A matched set holds the observed doses and binary outcomes of its units.
//! Its [`StratumTable`] splits the doses by outcome class; a vector of tables,
//! one per set, is a [`LatticeElement`] ordered by elementwise comparison of
//! the outcome-1 doses.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};

/// Default cap on set size for full permutation enumeration (10! ≈ 3.6M).
pub const DEFAULT_ENUMERATION_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub id: String,
    pub doses: Vec<f64>,
    pub outcomes: Vec<u8>,
}

impl MatchedSet {
    pub fn new(id: impl Into<String>, doses: Vec<f64>, outcomes: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if doses.len() != outcomes.len() {
            return Err(Error::Shape(format!(
                "set {id:?}: {} doses but {} outcomes",
                doses.len(),
                outcomes.len()
            )));
        }
        if doses.len() < 2 {
            return Err(Error::SetTooSmall { set_id: id });
        }
        if let Some(z) = doses.iter().find(|z| !z.is_finite()) {
            return Err(Error::invalid(format!("set {id:?}: non-finite dose {z}")));
        }
        if let Some(r) = outcomes.iter().find(|&&r| r > 1) {
            return Err(Error::invalid(format!("set {id:?}: outcome {r} is not binary")));
        }
        Ok(Self { id, doses, outcomes })
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    /// Number of units with outcome 1.
    pub fn events(&self) -> usize {
        self.outcomes.iter().filter(|&&r| r == 1).count()
    }

    pub fn is_concordant(&self) -> bool {
        let m = self.events();
        m == 0 || m == self.len()
    }

    pub fn has_tied_doses(&self) -> bool {
        let mut sorted = self.doses.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.windows(2).any(|w| w[0] == w[1])
    }

    pub fn outcomes_f64(&self) -> Vec<f64> {
        self.outcomes.iter().map(|&r| f64::from(r)).collect()
    }
}

/// Named real covariates, one row per unit in design order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    /// `rows[global_unit][column]`; `None` marks a blank cell.
    pub rows: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedDesign {
    pub sets: Vec<MatchedSet>,
    pub covariates: Option<CovariateTable>,
}

impl MatchedDesign {
    pub fn new(sets: Vec<MatchedSet>) -> Result<Self> {
        Self::with_covariates(sets, None)
    }

    pub fn with_covariates(sets: Vec<MatchedSet>, covariates: Option<CovariateTable>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::EmptyDesign);
        }
        let mut seen = HashSet::new();
        for s in &sets {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Duplicate {
                    set_id: s.id.clone(),
                    msg: "set id appears twice".into(),
                });
            }
        }
        let n: usize = sets.iter().map(MatchedSet::len).sum();
        if let Some(cov) = &covariates {
            if cov.rows.len() != n {
                return Err(Error::Shape(format!(
                    "covariate table has {} rows for {n} units",
                    cov.rows.len()
                )));
            }
            if cov.rows.iter().any(|r| r.len() != cov.names.len()) {
                return Err(Error::Shape("ragged covariate row".into()));
            }
        }
        Ok(Self { sets, covariates })
    }

    /// Number of matched sets, `I`.
    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    /// Total number of units, `N`.
    pub fn num_units(&self) -> usize {
        self.sets.iter().map(MatchedSet::len).sum()
    }

    /// Offset of each set's first unit in the global unit order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sets
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.len();
                o
            })
            .collect()
    }

    pub fn all_doses(&self) -> Vec<f64> {
        self.sets.iter().flat_map(|s| s.doses.iter().copied()).collect()
    }

    /// Concatenated outcome vector `R`, which is also the allocation `u⁺`.
    pub fn outcome_vector(&self) -> Vec<f64> {
        self.sets.iter().flat_map(MatchedSet::outcomes_f64).collect()
    }

    /// Split a global per-unit vector into per-set slices.
    pub fn split_units<'a, T>(&self, values: &'a [T]) -> Result<Vec<&'a [T]>> {
        if values.len() != self.num_units() {
            return Err(Error::Shape(format!(
                "per-unit vector has length {} for {} units",
                values.len(),
                self.num_units()
            )));
        }
        let mut out = Vec::with_capacity(self.sets.len());
        let mut rest = values;
        for s in &self.sets {
            let (head, tail) = rest.split_at(s.len());
            out.push(head);
            rest = tail;
        }
        Ok(out)
    }

    pub fn lattice_element(&self) -> LatticeElement {
        LatticeElement {
            tables: self.sets.iter().map(stratum_table).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// design-CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Reject sets with tied doses instead of using the equal-weight convention.
    pub strict_ties: bool,
}

/// Parse a design-CSV stream with the default options.
pub fn parse_design<R: Read>(source: R) -> Result<MatchedDesign> {
    parse_design_with(source, ParseOptions::default())
}

/// Parse `set_id,dose,outcome[,unit_id][,<covariate>...]`.
///
/// Units are grouped by `set_id` in order of first appearance and keep their
/// file order within a set. An optional `unit_id` column is checked for
/// duplicates within a set; every other extra column is a covariate.
pub fn parse_design_with<R: Read>(source: R, opts: ParseOptions) -> Result<MatchedDesign> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_set), Some(c_dose), Some(c_out)) = (col("set_id"), col("dose"), col("outcome")) else {
        return Err(Error::Parse {
            line: 1,
            msg: "header must contain set_id, dose, outcome".into(),
        });
    };
    let c_unit = col("unit_id");
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != c_set && i != c_dose && i != c_out && Some(i) != c_unit)
        .collect();
    let cov_names: Vec<String> = cov_cols.iter().map(|&i| headers[i].to_string()).collect();

    struct Pending {
        doses: Vec<f64>,
        outcomes: Vec<u8>,
        covs: Vec<Vec<Option<f64>>>,
        units: HashSet<String>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Pending> = HashMap::new();

    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let set_id = rec[c_set].to_string();
        if set_id.is_empty() {
            return Err(Error::Parse { line, msg: "empty set_id".into() });
        }
        let dose: f64 = rec[c_dose].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("dose {:?} is not a number", &rec[c_dose]),
        })?;
        if !dose.is_finite() {
            return Err(Error::Parse { line, msg: "dose must be finite".into() });
        }
        let outcome = match &rec[c_out] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::NonBinaryOutcome { line, value: other.to_string() });
            }
        };
        let mut row = Vec::with_capacity(cov_cols.len());
        for &c in &cov_cols {
            let cell = &rec[c];
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("covariate {:?} value {cell:?} is not a number", &headers[c]),
                })?;
                row.push(Some(v));
            }
        }
        let entry = groups.entry(set_id.clone()).or_insert_with(|| {
            order.push(set_id.clone());
            Pending { doses: vec![], outcomes: vec![], covs: vec![], units: HashSet::new() }
        });
        if let Some(cu) = c_unit {
            let unit = rec[cu].to_string();
            if !entry.units.insert(unit.clone()) {
                return Err(Error::Duplicate {
                    set_id,
                    msg: format!("unit_id {unit:?} repeated at line {line}"),
                });
            }
        }
        entry.doses.push(dose);
        entry.outcomes.push(outcome);
        entry.covs.push(row);
    }

    let mut sets = Vec::with_capacity(order.len());
    let mut cov_rows = Vec::new();
    for id in order {
        let p = groups.remove(&id).expect("grouped set");
        let set = MatchedSet::new(id, p.doses, p.outcomes)?;
        if opts.strict_ties && set.has_tied_doses() {
            return Err(Error::TiedDoses { set_id: set.id });
        }
        sets.push(set);
        cov_rows.extend(p.covs);
    }
    let covariates = if cov_names.is_empty() {
        None
    } else {
        Some(CovariateTable { names: cov_names, rows: cov_rows })
    };
    MatchedDesign::with_covariates(sets, covariates)
}

/// Write a design back to design-CSV. Doses use shortest round-trip formatting.
pub fn write_design<W: Write>(design: &MatchedDesign, sink: W) -> Result<()> {
    let io = |e: csv::Error| Error::invalid(format!("write failed: {e}"));
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["set_id".to_string(), "dose".into(), "outcome".into()];
    if let Some(cov) = &design.covariates {
        header.extend(cov.names.iter().cloned());
    }
    w.write_record(&header).map_err(io)?;
    let mut unit = 0;
    for s in &design.sets {
        for (z, r) in s.doses.iter().zip(&s.outcomes) {
            let mut rec = vec![s.id.clone(), format!("{z:?}"), r.to_string()];
            if let Some(cov) = &design.covariates {
                rec.extend(
                    cov.rows[unit]
                        .iter()
                        .map(|v| v.map(|x| format!("{x:?}")).unwrap_or_default()),
                );
            }
            w.write_record(&rec).map_err(io)?;
            unit += 1;
        }
    }
    w.flush().map_err(|e| Error::invalid(format!("write failed: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stratum tables and the lattice
// ---------------------------------------------------------------------------

/// Doses split by outcome class, each half sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumTable {
    pub s0: Vec<f64>,
    pub s1: Vec<f64>,
}

impl StratumTable {
    /// Build from the outcome-1 doses, taking the complement in `all_doses`.
    pub fn from_s1(all_doses: &[f64], mut s1: Vec<f64>) -> Result<Self> {
        s1.sort_by(f64::total_cmp);
        let mut pool = all_doses.to_vec();
        pool.sort_by(f64::total_cmp);
        let mut s0 = Vec::with_capacity(pool.len().saturating_sub(s1.len()));
        let mut j = 0;
        for z in pool {
            if j < s1.len() && s1[j] == z {
                j += 1;
            } else {
                s0.push(z);
            }
        }
        if j != s1.len() {
            return Err(Error::Shape("outcome-1 doses are not a sub-multiset of the stratum".into()));
        }
        Ok(Self { s0, s1 })
    }

    pub fn len(&self) -> usize {
        self.s0.len() + self.s1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All doses of the stratum, sorted.
    pub fn doses(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.s0.iter().chain(&self.s1).copied().collect();
        d.sort_by(f64::total_cmp);
        d
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.s1.len() != other.s1.len() || self.s0.len() != other.s0.len() {
            return Err(Error::Shape("strata differ in outcome counts".into()));
        }
        if self.doses() != other.doses() {
            return Err(Error::Shape("strata hold different dose multisets".into()));
        }
        Ok(())
    }

    pub fn join(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let s1 = self.s1.iter().zip(&other.s1).map(|(a, b)| a.max(*b)).collect();
        Self::from_s1(&self.doses(), s1)
    }

    pub fn meet(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let s1 = self.s1.iter().zip(&other.s1).map(|(a, b)| a.min(*b)).collect();
        Self::from_s1(&self.doses(), s1)
    }

    pub fn leq(&self, other: &Self) -> Result<bool> {
        self.check_compatible(other)?;
        Ok(self.s1.iter().zip(&other.s1).all(|(a, b)| a <= b))
    }
}

/// Sort each outcome class of a set into its stratum table.
pub fn stratum_table(set: &MatchedSet) -> StratumTable {
    let mut s0 = Vec::new();
    let mut s1 = Vec::new();
    for (&z, &r) in set.doses.iter().zip(&set.outcomes) {
        if r == 1 {
            s1.push(z);
        } else {
            s0.push(z);
        }
    }
    s0.sort_by(f64::total_cmp);
    s1.sort_by(f64::total_cmp);
    StratumTable { s0, s1 }
}

/// One stratum table per matched set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeElement {
    pub tables: Vec<StratumTable>,
}

impl LatticeElement {
    fn zip_with(
        &self,
        other: &Self,
        f: impl Fn(&StratumTable, &StratumTable) -> Result<StratumTable>,
    ) -> Result<Self> {
        if self.tables.len() != other.tables.len() {
            return Err(Error::Shape(format!(
                "{} strata vs {} strata",
                self.tables.len(),
                other.tables.len()
            )));
        }
        let tables = self
            .tables
            .iter()
            .zip(&other.tables)
            .map(|(a, b)| f(a, b))
            .collect::<Result<_>>()?;
        Ok(Self { tables })
    }

    pub fn join(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, StratumTable::join)
    }

    pub fn meet(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, StratumTable::meet)
    }

    pub fn leq(&self, other: &Self) -> Result<bool> {
        if self.tables.len() != other.tables.len() {
            return Err(Error::Shape("different numbers of strata".into()));
        }
        for (a, b) in self.tables.iter().zip(&other.tables) {
            if !a.leq(b)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Sum of all outcome-1 doses.
    pub fn sum_s1(&self) -> f64 {
        self.tables.iter().flat_map(|t| t.s1.iter()).sum()
    }
}

pub fn lattice_join(a: &LatticeElement, b: &LatticeElement) -> Result<LatticeElement> {
    a.join(b)
}

pub fn lattice_meet(a: &LatticeElement, b: &LatticeElement) -> Result<LatticeElement> {
    a.meet(b)
}

pub fn lattice_leq(a: &LatticeElement, b: &LatticeElement) -> Result<bool> {
    a.leq(b)
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetDiagnostics {
    pub set_id: String,
    pub n: usize,
    pub m: usize,
    pub concordant: bool,
    pub tied_doses: bool,
    /// `n` is within the full-enumeration cap.
    pub enumerable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignDiagnostics {
    pub num_sets: usize,
    pub num_units: usize,
    pub num_concordant: usize,
    pub num_discordant: usize,
    pub num_tied: usize,
    pub num_not_enumerable: usize,
    pub enumeration_cap: usize,
    pub max_set_size: usize,
    pub has_covariates: bool,
    /// Tied doses are handled by enumerating index permutations, which gives
    /// every distinct dose arrangement equal weight.
    pub tie_convention: String,
    pub sets: Vec<SetDiagnostics>,
}

pub fn validate(design: &MatchedDesign, cap: usize) -> DesignDiagnostics {
    let sets: Vec<SetDiagnostics> = design
        .sets
        .iter()
        .map(|s| SetDiagnostics {
            set_id: s.id.clone(),
            n: s.len(),
            m: s.events(),
            concordant: s.is_concordant(),
            tied_doses: s.has_tied_doses(),
            enumerable: s.len() <= cap,
        })
        .collect();
    let num_concordant = sets.iter().filter(|d| d.concordant).count();
    DesignDiagnostics {
        num_sets: design.num_sets(),
        num_units: design.num_units(),
        num_concordant,
        num_discordant: sets.len() - num_concordant,
        num_tied: sets.iter().filter(|d| d.tied_doses).count(),
        num_not_enumerable: sets.iter().filter(|d| !d.enumerable).count(),
        enumeration_cap: cap,
        max_set_size: sets.iter().map(|d| d.n).max().unwrap_or(0),
        has_covariates: design.covariates.is_some(),
        tie_convention: "equal-weight distinct arrangements".into(),
        sets,
    }
}
