use std::path::Path;

use anyhow::{bail, Context, Result};
use dosesens_core::dgp::{DgpSpec, DoseLaw, OutcomeCurve};
use serde::{Deserialize, Serialize};

/// Data-generating process as written in a TOML or JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    /// `power:<a>` or `indicator`.
    pub f: String,
    pub beta: f64,
    #[serde(default)]
    pub effect_mean: f64,
    /// `uniform`, `beta:<a>,<b>` or `mixture:<w>,<component>`.
    #[serde(default = "uniform")]
    pub dose_law: String,
}

fn uniform() -> String {
    "uniform".into()
}

impl DgpConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        }
    }

    pub fn to_spec(&self) -> Result<DgpSpec> {
        Ok(DgpSpec::new(parse_curve(&self.f)?, self.beta, self.effect_mean, parse_law(&self.dose_law)?)?)
    }
}

fn num(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().with_context(|| format!("bad number {s:?} in {what}"))
}

pub fn parse_curve(s: &str) -> Result<OutcomeCurve> {
    let s = s.trim();
    if s == "indicator" {
        return Ok(OutcomeCurve::Indicator);
    }
    match s.split_once(':') {
        Some(("power", a)) => Ok(OutcomeCurve::Power(num(a, "f")?)),
        _ => bail!("unknown outcome curve {s:?}; expected power:<a> or indicator"),
    }
}

pub fn parse_law(s: &str) -> Result<DoseLaw> {
    let s = s.trim();
    if s == "uniform" {
        return Ok(DoseLaw::Uniform);
    }
    match s.split_once(':') {
        Some(("beta", ab)) => {
            let (a, b) = ab.split_once(',').context("beta law needs two parameters, as beta:2,2")?;
            Ok(DoseLaw::Beta(num(a, "dose_law")?, num(b, "dose_law")?))
        }
        Some(("mixture", rest)) => {
            let (w, component) = rest.split_once(',').context("mixture law is mixture:<weight>,<component>")?;
            Ok(DoseLaw::Mixture { zero_weight: num(w, "dose_law")?, component: Box::new(parse_law(component)?) })
        }
        _ => bail!("unknown dose law {s:?}; expected uniform, beta:<a>,<b> or mixture:<w>,<law>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_laws_and_curves() {
        assert_eq!(parse_law("beta:2,8").unwrap(), DoseLaw::Beta(2.0, 8.0));
        assert_eq!(
            parse_law("mixture:0.2,uniform").unwrap(),
            DoseLaw::Mixture { zero_weight: 0.2, component: Box::new(DoseLaw::Uniform) }
        );
        assert_eq!(parse_curve("power:0.25").unwrap(), OutcomeCurve::Power(0.25));
        assert!(parse_curve("log").is_err());
    }

    #[test]
    fn toml_block() {
        let c: DgpConfig = toml::from_str("f = \"power:4\"\nbeta = 1.5\ndose_law = \"beta:2,2\"\n").unwrap();
        assert_eq!(c.effect_mean, 0.0);
        assert!(c.to_spec().is_ok());
    }
}
