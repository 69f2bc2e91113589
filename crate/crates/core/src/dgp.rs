//! Simulated matched designs with a random set effect and a dose-response
//! curve on the logit scale, in the absence of hidden bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::design::{MatchedDesign, MatchedSet};
use crate::error::{Error, Result};
use crate::rng::{substream, tag, StreamRng};

/// Dose-response curve `f` in `expit(A + f(z) β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeCurve {
    /// `z^a`.
    Power(f64),
    /// `1{z > 0}`.
    Indicator,
}

impl OutcomeCurve {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            OutcomeCurve::Power(a) => z.max(0.0).powf(a),
            OutcomeCurve::Indicator => f64::from(u8::from(z > 0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DoseLaw {
    Uniform,
    Beta(f64, f64),
    /// Point mass at zero with the given weight, otherwise the component law.
    Mixture { zero_weight: f64, component: Box<DoseLaw> },
}

impl DoseLaw {
    fn check(&self) -> Result<()> {
        match self {
            DoseLaw::Uniform => Ok(()),
            DoseLaw::Beta(a, b) => {
                if a.is_finite() && b.is_finite() && *a > 0.0 && *b > 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("beta parameters ({a}, {b}) must be positive")))
                }
            }
            DoseLaw::Mixture { zero_weight, component } => {
                if !(0.0..=1.0).contains(zero_weight) {
                    return Err(Error::invalid(format!("mixture weight {zero_weight} outside [0,1]")));
                }
                if matches!(**component, DoseLaw::Mixture { .. }) {
                    return Err(Error::invalid("nested mixtures are not supported"));
                }
                component.check()
            }
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match self {
            DoseLaw::Uniform => rng.random::<f64>(),
            DoseLaw::Beta(a, b) => Beta::new(*a, *b).expect("checked parameters").sample(rng),
            DoseLaw::Mixture { zero_weight, component } => {
                if rng.random::<f64>() < *zero_weight {
                    0.0
                } else {
                    component.sample(rng)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub f: OutcomeCurve,
    pub beta: f64,
    /// Mean of the normal set effect; its standard deviation is 1.
    pub effect_mean: f64,
    pub dose_law: DoseLaw,
}

impl DgpSpec {
    pub fn new(f: OutcomeCurve, beta: f64, effect_mean: f64, dose_law: DoseLaw) -> Result<Self> {
        if !beta.is_finite() || !effect_mean.is_finite() {
            return Err(Error::invalid("beta and effect mean must be finite"));
        }
        if let OutcomeCurve::Power(a) = f {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::invalid(format!("power {a} must be positive")));
            }
        }
        dose_law.check()?;
        Ok(Self { f, beta, effect_mean, dose_law })
    }
}

/// Set size `2 + X`, where `X = 0` w.p. 0.9 and `X ~ Poisson(0.5)` otherwise.
pub fn sample_set_size(rng: &mut StreamRng) -> usize {
    if rng.random::<f64>() < 0.9 {
        2
    } else {
        2 + Poisson::new(0.5).expect("valid rate").sample(rng) as usize
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draw one matched set from its own substream.
pub fn sample_set(dgp: &DgpSpec, seed: u64, index: u64) -> MatchedSet {
    let mut rng = substream(seed, &[tag::DGP_STRATUM, index]);
    let n = sample_set_size(&mut rng);
    let a = Normal::new(dgp.effect_mean, 1.0).expect("unit sd").sample(&mut rng);
    let mut doses = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let z = dgp.dose_law.sample(&mut rng);
        let p = expit(a + dgp.f.eval(z) * dgp.beta);
        doses.push(z);
        outcomes.push(u8::from(rng.random::<f64>() < p));
    }
    MatchedSet::new(format!("s{index}"), doses, outcomes).expect("generated sets are valid")
}

/// A design of `num_sets` independently generated matched sets.
pub fn sample_dgp(dgp: &DgpSpec, num_sets: usize, seed: u64) -> Result<MatchedDesign> {
    if num_sets == 0 {
        return Err(Error::EmptyDesign);
    }
    let sets: Vec<MatchedSet> = (0..num_sets as u64).into_par_iter().map(|i| sample_set(dgp, seed, i)).collect();
    MatchedDesign::new(sets)
}

impl FromStr for OutcomeCurve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "indicator" => Ok(OutcomeCurve::Indicator),
            other => match other.split_once(':') {
                Some(("power", a)) => a
                    .trim()
                    .parse()
                    .map(OutcomeCurve::Power)
                    .map_err(|_| Error::invalid(format!("bad power {a:?}"))),
                _ => Err(Error::invalid(format!("unknown outcome curve {s:?}"))),
            },
        }
    }
}

impl fmt::Display for OutcomeCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeCurve::Power(a) => write!(f, "power:{a}"),
            OutcomeCurve::Indicator => f.write_str("indicator"),
        }
    }
}

impl FromStr for DoseLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |v: &str| -> Result<f64> {
            v.trim().parse().map_err(|_| Error::invalid(format!("bad number {v:?} in dose law {s:?}")))
        };
        let law = match s.split_once(':') {
            None if s == "uniform" => DoseLaw::Uniform,
            Some(("beta", rest)) => {
                let (a, b) = rest.split_once(',').ok_or_else(|| Error::invalid("beta needs a,b"))?;
                DoseLaw::Beta(num(a)?, num(b)?)
            }
            Some(("mixture", rest)) => {
                let (w, comp) = rest.split_once(',').ok_or_else(|| Error::invalid("mixture needs weight,law"))?;
                DoseLaw::Mixture { zero_weight: num(w)?, component: Box::new(comp.parse()?) }
            }
            _ => return Err(Error::invalid(format!("unknown dose law {s:?}"))),
        };
        law.check()?;
        Ok(law)
    }
}

impl fmt::Display for DoseLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DoseLaw::Uniform => f.write_str("uniform"),
            DoseLaw::Beta(a, b) => write!(f, "beta:{a},{b}"),
            DoseLaw::Mixture { zero_weight, component } => write!(f, "mixture:{zero_weight},{component}"),
        }
    }
}
