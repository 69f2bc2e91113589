use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use dosesens_core::assignment::{tv_from_uniform, DoseTransform, SensitivityParameter};
use dosesens_core::attributable::{
    separability_scores, separability_test, tae_confidence_set, test_tae_bnb, test_tae_enumeration_with,
    BnbMode, Decision, Hypothesis, Sidedness, TaeInstance, TaeSolver, TaeTestResult,
};
use dosesens_core::balance::{balance_report, write_balance_csv, DEFAULT_PERMUTATION_REPS};
use dosesens_core::design::{parse_design_with, validate as validate_design, MatchedDesign, ParseOptions, DEFAULT_ENUMERATION_CAP};
use dosesens_core::design_sensitivity::{simulate_power_curve, solve_design_sensitivity, DesignSensitivityResult};
use dosesens_core::hardness::{formulate_signomial, verify_counterexample, COUNTEREXAMPLE_DOSES, COUNTEREXAMPLE_SCORES, COUNTEREXAMPLE_T};
use dosesens_core::sharp_null::{changepoint, p_value_curve, worst_case_p, CubeSearch, Method};
use dosesens_core::statistic::{MonotoneTable, Statistic};
use serde::Serialize;
use serde_json::json;

use crate::dgp_config::DgpConfig;
use crate::report::{InputDigest, Report};

fn load_design(path: &Path, strict_ties: bool) -> Result<(MatchedDesign, InputDigest)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let design = parse_design_with(bytes.as_slice(), ParseOptions { strict_ties })
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok((design, InputDigest::of(path, &bytes)))
}

fn parse_gammas(s: &str) -> Result<Vec<f64>> {
    let g = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad gamma {v:?}")))
        .collect::<Result<Vec<f64>>>()?;
    ensure!(g.iter().all(|v| v.is_finite() && *v >= 0.0), "gammas must be finite and >= 0");
    Ok(g)
}

fn parse_transform(s: &str) -> Result<DoseTransform> {
    let s = s.trim();
    if s == "identity" {
        return Ok(DoseTransform::Identity);
    }
    match s.split_once(':') {
        Some(("power", a)) => Ok(DoseTransform::Power(a.trim().parse().with_context(|| format!("bad exponent {a:?}"))?)),
        Some(("table", knots)) => {
            let knots = knots
                .split(',')
                .map(|kv| {
                    let (x, y) = kv.split_once('=').with_context(|| format!("knot {kv:?} is not x=y"))?;
                    Ok((x.trim().parse()?, y.trim().parse()?))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?;
            Ok(DoseTransform::Table(MonotoneTable::new(knots)?))
        }
        _ => bail!("unknown dose transform {s:?}; expected identity, power:<a> or table:<x=y,...>"),
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PMethodArg {
    Normal,
    ExactMc,
    Enumeration,
}

#[derive(Debug, Args, Serialize)]
pub struct SharpNullArgs {
    /// Design CSV: set_id,dose,outcome[,covariates...].
    #[arg(long)]
    pub input: PathBuf,
    /// Statistic: t, threshold:<c>, rank-within, rank-across, power:<a>,
    /// custom:<x=y,...>, lower:<spec> or adaptive:<spec>,<spec>,...
    #[arg(long, default_value = "t")]
    pub stat: String,
    /// Sensitivity parameter gamma = log(Gamma), or a comma-separated ascending grid.
    #[arg(long, default_value = "0")]
    pub gamma: String,
    #[arg(long, value_enum, default_value = "normal")]
    pub method: PMethodArg,
    #[arg(long, default_value_t = 10_000)]
    pub reps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Level used to report the changepoint of a gamma grid.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Monotone dose map inside the bias model: identity, power:<a> or table:<x=y,...>.
    #[arg(long, default_value = "identity")]
    pub transform: String,
    /// Write (Gamma, p_worst) along the grid as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub curve: Option<PathBuf>,
    /// Write per-set total variation from uniform assignment at u+ as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub tv_csv: Option<PathBuf>,
    /// Reject sets with tied doses instead of weighting arrangements equally.
    #[arg(long)]
    pub strict_ties: bool,
}

#[derive(Serialize)]
struct CurveRow {
    #[serde(rename = "Gamma")]
    big_gamma: f64,
    p_worst: f64,
}

#[derive(Serialize)]
struct TvRow {
    set_id: String,
    n: usize,
    m: usize,
    tv: Option<f64>,
}

pub fn sharp_null(a: SharpNullArgs) -> Result<(Report, bool)> {
    let (design, digest) = load_design(&a.input, a.strict_ties)?;
    let stat: Statistic = a.stat.parse()?;
    let gammas = parse_gammas(&a.gamma)?;
    let transform = parse_transform(&a.transform)?;
    let method = match a.method {
        PMethodArg::Normal => Method::Normal,
        PMethodArg::ExactMc => Method::ExactMc { reps: a.reps, seed: a.seed },
        PMethodArg::Enumeration => Method::Enumeration,
    };
    let mut warnings = Vec::new();
    let result = if gammas.len() == 1 {
        let gp = SensitivityParameter::with_transform(gammas[0], transform.clone())?;
        let (p, parts) = worst_case_p(&design, &stat, &gp, method)?;
        if parts.iter().any(|r| r.small_sample) && a.method == PMethodArg::Normal {
            warnings.push("fewer than 20 discordant sets; the normal approximation may be inaccurate".into());
        }
        if let Some(path) = &a.curve {
            write_csv(path, &[CurveRow { big_gamma: gp.big_gamma(), p_worst: p }])?;
        }
        let first = &parts[0];
        json!({
            "gamma": gp.gamma,
            "Gamma": gp.big_gamma(),
            "t_obs": first.t_obs,
            "p_worst": p,
            "method": a.method,
            "mc_se": first.mc_se,
            "reps": first.reps,
            "seed": first.seed,
            "components": parts,
        })
    } else {
        let curve = p_value_curve(&design, &stat, &gammas, &transform, method)?;
        if let Some(path) = &a.curve {
            let rows: Vec<CurveRow> = curve.iter().map(|c| CurveRow { big_gamma: c.big_gamma, p_worst: c.p_worst }).collect();
            write_csv(path, &rows)?;
        }
        let cp = changepoint(&curve, a.alpha);
        json!({
            "method": a.method,
            "alpha": a.alpha,
            "changepoint_gamma": cp,
            "changepoint_Gamma": cp.map(f64::exp),
            "curve": curve,
        })
    };
    if let Some(path) = &a.tv_csv {
        let gp = SensitivityParameter::with_transform(*gammas.last().expect("nonempty grid"), transform)?;
        let rows: Vec<TvRow> = design
            .sets
            .iter()
            .map(|s| {
                let u: Vec<f64> = s.outcomes.iter().map(|&r| f64::from(r)).collect();
                let tv = tv_from_uniform(s, &gp, &u, DEFAULT_ENUMERATION_CAP).ok();
                if tv.is_none() {
                    warnings.push(format!("set {:?} is too large for the total variation diagnostic", s.id));
                }
                TvRow { set_id: s.id.clone(), n: s.len(), m: s.events(), tv }
            })
            .collect();
        write_csv(path, &rows)?;
    }
    let seed = (a.method == PMethodArg::ExactMc).then_some(a.seed);
    Ok((Report::new("sharp-null", &a, seed, result)?.with_input(Some(digest)).with_warnings(warnings), true))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverArg {
    Enum,
    Bnb,
    Relaxed,
    Separability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SidednessArg {
    Directional,
    Upper,
}

#[derive(Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["delta", "ci"])))]
pub struct TaeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Dose threshold c; units dosed above c count as exposed.
    #[arg(long)]
    pub threshold: f64,
    /// Doses at or below eps reveal the outcome at zero dose.
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Test the point hypothesis TAE = delta.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<i64>,
    /// Report the confidence set instead of a single test.
    #[arg(long)]
    pub ci: bool,
    #[arg(long, value_enum, default_value = "bnb")]
    pub solver: SolverArg,
    #[arg(long, value_enum, default_value = "directional")]
    pub sidedness: SidednessArg,
    #[arg(long)]
    pub strict_ties: bool,
}

fn summarize_test(r: &TaeTestResult) -> serde_json::Value {
    json!({
        "delta": r.delta,
        "decision": r.decision,
        "mode": r.mode,
        "nodes_explored": r.nodes_explored,
        "p_value": r.p_value,
        "details": r,
    })
}

pub fn tae(a: TaeArgs) -> Result<(Report, bool)> {
    let (design, digest) = load_design(&a.input, a.strict_ties)?;
    let side = match a.sidedness {
        SidednessArg::Directional => Sidedness::Directional,
        SidednessArg::Upper => Sidedness::Upper,
    };
    let inst = TaeInstance::new(a.threshold, a.eps, a.alpha, SensitivityParameter::new(a.gamma)?)?.with_sidedness(side);
    let observed = inst.observed_count(&design);
    let mut warnings = Vec::new();
    let result = match (a.delta, a.solver) {
        (Some(delta), SolverArg::Separability) => summarize_test(&separability_test(&design, &inst, delta)?),
        (Some(delta), solver) => {
            let r = match solver {
                SolverArg::Enum => test_tae_enumeration_with(&design, &inst, delta, Hypothesis::Equal)?,
                SolverArg::Bnb => test_tae_bnb(&design, &inst, delta, BnbMode::Exact)?,
                SolverArg::Relaxed => test_tae_bnb(&design, &inst, delta, BnbMode::Relaxed)?,
                SolverArg::Separability => unreachable!(),
            };
            if r.decision == Decision::Undecided {
                warnings.push("node budget exhausted; the hypothesis is conservatively not rejected".into());
            }
            summarize_test(&r)
        }
        (None, SolverArg::Separability) => {
            let mut accepted = Vec::new();
            for delta in 0..=observed {
                if separability_test(&design, &inst, delta)?.accepted() {
                    accepted.push(delta);
                }
            }
            json!({
                "observed": observed,
                "interval": accepted.first().map(|lo| [*lo, *accepted.last().unwrap()]),
                "accepted_points": accepted,
                "mode": "separability",
                "scores": separability_scores(&design, &inst)?,
            })
        }
        (None, solver) => {
            let solver = match solver {
                SolverArg::Enum => TaeSolver::Enumeration,
                SolverArg::Bnb => TaeSolver::BranchAndBound,
                _ => TaeSolver::Relaxed,
            };
            let cs = tae_confidence_set(&design, &inst, solver)?;
            if cs.as_ref().is_some_and(|c| c.undecided) {
                warnings.push("node budget exhausted in some test; the interval is conservative".into());
            }
            json!({
                "observed": observed,
                "interval": cs.as_ref().map(|c| [c.lower, c.upper]),
                "mode": solver,
                "confidence_set": cs,
            })
        }
    };
    Ok((Report::new("tae", &a, None, result)?.with_input(Some(digest)).with_warnings(warnings), true))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct DgpArgs {
    /// TOML or JSON file with keys f, beta, effect_mean, dose_law. Overrides the flags below.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    /// Outcome curve: power:<a> or indicator.
    #[arg(long, default_value = "power:0.25")]
    pub f: String,
    #[arg(long, default_value_t = 1.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub effect_mean: f64,
    /// uniform, beta:<a>,<b> or mixture:<w>,<law>.
    #[arg(long, default_value = "uniform")]
    pub dose_law: String,
}

impl DgpArgs {
    fn resolve(&self) -> Result<(DgpConfig, Option<InputDigest>)> {
        match &self.dgp {
            Some(path) => {
                let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                Ok((DgpConfig::load(path)?, Some(InputDigest::of(path, &bytes))))
            }
            None => Ok((
                DgpConfig { f: self.f.clone(), beta: self.beta, effect_mean: self.effect_mean, dose_law: self.dose_law.clone() },
                None,
            )),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DesignSensArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    /// Statistic; for adaptive statistics the largest component value is reported.
    #[arg(long, default_value = "t")]
    pub stat: String,
    /// Simulated matched sets used for every expectation.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    /// Bisection tolerance on gamma.
    #[arg(long, default_value_t = 1e-2)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the evaluated (gamma, phi, se, gap) points as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub curve: Option<PathBuf>,
}

pub fn design_sens(a: DesignSensArgs) -> Result<(Report, bool)> {
    let (cfg, digest) = a.dgp.resolve()?;
    let dgp = cfg.to_spec()?;
    let stat: Statistic = a.stat.parse()?;
    let parts: Vec<(String, DesignSensitivityResult)> = stat
        .components()
        .into_iter()
        .zip(component_names(&a.stat))
        .map(|(spec, name)| Ok((name, solve_design_sensitivity(&dgp, spec, a.draws, a.tol, a.seed)?)))
        .collect::<Result<_>>()?;
    let best = parts.iter().map(|(_, r)| r.gamma_tilde).fold(f64::NEG_INFINITY, f64::max);
    if let Some(path) = &a.curve {
        #[derive(Serialize)]
        struct Row<'a> {
            component: &'a str,
            gamma: f64,
            phi: f64,
            se: f64,
            gap: f64,
        }
        let rows: Vec<Row> = parts
            .iter()
            .flat_map(|(name, r)| {
                r.phi_samples.iter().map(move |p| Row { component: name, gamma: p.gamma, phi: p.phi, se: p.se, gap: p.gap })
            })
            .collect();
        write_csv(path, &rows)?;
    }
    let components: Vec<serde_json::Value> =
        parts.iter().map(|(name, r)| json!({ "statistic": name, "result": r })).collect();
    let result = json!({
        "dgp": cfg,
        "gamma_tilde": best,
        "Gamma_tilde": best.exp(),
        "components": components,
    });
    Ok((Report::new("design-sens", &a, Some(a.seed), result)?.with_input(digest), true))
}

/// Component labels of a statistic string, in the order of `components()`.
fn component_names(stat: &str) -> Vec<String> {
    match stat.trim().strip_prefix("adaptive:") {
        None => vec![stat.trim().to_string()],
        Some(rest) => {
            let mut parts: Vec<String> = Vec::new();
            for tok in rest.split(',') {
                match parts.last_mut() {
                    Some(prev) if tok.contains('=') && prev.contains("custom:") => {
                        prev.push(',');
                        prev.push_str(tok);
                    }
                    _ => parts.push(tok.trim().to_string()),
                }
            }
            parts
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("grid").args(["gammas", "big_gammas"])))]
pub struct PowerArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long, default_value = "t")]
    pub stat: String,
    /// Comma-separated gamma = log(Gamma) values.
    #[arg(long)]
    pub gammas: Option<String>,
    /// Comma-separated Gamma values (at least 1).
    #[arg(long = "Gammas")]
    pub big_gammas: Option<String>,
    /// Matched sets per simulated design.
    #[arg(long, default_value_t = 2000)]
    pub sets: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write (Gamma, power, se) as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub curve: Option<PathBuf>,
}

pub fn power(a: PowerArgs) -> Result<(Report, bool)> {
    let (cfg, digest) = a.dgp.resolve()?;
    let dgp = cfg.to_spec()?;
    let stat: Statistic = a.stat.parse()?;
    let gammas = match (&a.gammas, &a.big_gammas) {
        (Some(g), _) => parse_gammas(g)?,
        (None, Some(big)) => {
            let big = parse_gammas(big)?;
            ensure!(big.iter().all(|&g| g >= 1.0), "Gamma values must be at least 1");
            big.iter().map(|g| g.ln()).collect()
        }
        (None, None) => vec![0.0],
    };
    let curve = simulate_power_curve(&dgp, &stat, &gammas, a.sets, a.alpha, a.reps, a.seed)?;
    if let Some(path) = &a.curve {
        #[derive(Serialize)]
        struct Row {
            #[serde(rename = "Gamma")]
            big_gamma: f64,
            power: f64,
            se: f64,
        }
        let rows: Vec<Row> = curve.iter().map(|p| Row { big_gamma: p.big_gamma, power: p.power, se: p.se }).collect();
        write_csv(path, &rows)?;
    }
    let result = json!({ "dgp": cfg, "statistic": a.stat, "curve": curve });
    Ok((Report::new("power", &a, Some(a.seed), result)?.with_input(digest), true))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct BalanceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Within-set permutations per cross-fitted statistic.
    #[arg(long, default_value_t = DEFAULT_PERMUTATION_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the balance table as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub strict_ties: bool,
}

pub fn balance(a: BalanceArgs) -> Result<(Report, bool)> {
    let (design, digest) = load_design(&a.input, a.strict_ties)?;
    let report = balance_report(&design, a.alpha, a.reps, a.seed)?;
    if let Some(path) = &a.csv {
        let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        write_balance_csv(&report.rows, f)?;
    }
    let mut warnings = Vec::new();
    let rt = &report.randomization_test;
    if !rt.dropped_covariates.is_empty() {
        warnings.push(format!("covariates with missing values left out of the fits: {}", rt.dropped_covariates.join(", ")));
    }
    if rt.ridge_fallback {
        warnings.push("singular least-squares fit; ridge jitter applied".into());
    }
    if rt.degenerate {
        warnings.push("a cross-fitted statistic does not vary under permutation; its p-value is 1".into());
    }
    Ok((Report::new("balance", &a, Some(a.seed), report)?.with_input(Some(digest)).with_warnings(warnings), true))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct DemoHardnessArgs {
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub grid_step: f64,
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Level used in the objective of the emitted program.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Write the signomial program in text form.
    #[arg(long)]
    #[serde(skip)]
    pub program: Option<PathBuf>,
}

pub fn demo_hardness(a: DemoHardnessArgs) -> Result<(Report, bool)> {
    let search = CubeSearch { grid_step: a.grid_step, restarts: a.restarts, seed: a.seed };
    let report = verify_counterexample(a.gamma, search)?;
    let set = dosesens_core::design::MatchedSet::new("counterexample", COUNTEREXAMPLE_DOSES.to_vec(), vec![0; 5])?;
    let design = MatchedDesign::new(vec![set])?;
    let prog = formulate_signomial(&design, &COUNTEREXAMPLE_SCORES, &SensitivityParameter::new(a.gamma)?, a.alpha, COUNTEREXAMPLE_T)?;
    if let Some(path) = &a.program {
        std::fs::write(path, prog.to_string()).with_context(|| format!("writing {}", path.display()))?;
    }
    let ok = report.passed || report.skipped;
    let result = json!({ "counterexample": report, "program_counts": prog.counts() });
    Ok((Report::new("demo-hardness", &a, Some(a.seed), result)?, ok))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Largest set size for full permutation enumeration.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    pub cap: usize,
    #[arg(long)]
    pub strict_ties: bool,
}

pub fn validate(a: ValidateArgs) -> Result<(Report, bool)> {
    let (design, digest) = load_design(&a.input, a.strict_ties)?;
    let diag = validate_design(&design, a.cap);
    let mut warnings = Vec::new();
    if diag.num_tied > 0 {
        warnings.push(format!("{} sets have tied doses; {}", diag.num_tied, diag.tie_convention));
    }
    Ok((Report::new("validate", &a, None, diag)?.with_input(Some(digest)).with_warnings(warnings), true))
}
