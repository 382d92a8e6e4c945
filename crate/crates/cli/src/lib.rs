//! Library side of the `hdekit` command: argument types, CSV ingestion,
//! the four commands and their reports.

pub mod args;
pub mod data;
pub mod report;

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use hdekit_core::hde::{hde_table, MethodChoice};
use hdekit_core::scenarios::{sweep_row, Scenario, ScenarioKind};
use hdekit_core::tests_alt::{hde_free_wald, lrt, score_test, tipping_ratios, wald_test, InfoAt};
use hdekit_core::vglm::{fit_irls, FitStatus, IrlsOptions, VglmFit};

use args::{Command, Format, ModelArgs, SweepArgs, TestsArgs};
use report::{CoefRow, HdeOut, ModelInfo, Report, SweepReport, TestsOut, Timing};

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// Bad input, arguments or configuration.
    Config(String),
    Convergence(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Convergence(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Convergence(m) => write!(f, "convergence failure: {m}"),
            Failure::Numeric(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<hdekit_core::Error> for Failure {
    fn from(e: hdekit_core::Error) -> Self {
        use hdekit_core::Error as E;
        match e {
            E::NotConverged(_) => Failure::Convergence(e.to_string()),
            E::Unsupported(_) | E::ShapeMismatch(_) => Failure::Config(e.to_string()),
            _ => Failure::Numeric(e.to_string()),
        }
    }
}

/// Exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        f.exit_code()
    } else if let Some(e) = err.downcast_ref::<hdekit_core::Error>() {
        Failure::from(e.clone()).exit_code()
    } else {
        4
    }
}

/// Run a command and return what it prints.
pub fn run(cmd: &Command) -> anyhow::Result<String> {
    match cmd {
        Command::Fit(a) => render(&cmd_fit(a)?, a.format),
        Command::Hde(a) => render(&cmd_hde(a)?, a.format),
        Command::Tests(a) => render(&cmd_tests(a)?, a.model.format),
        Command::Sweep(a) => render_sweep(&cmd_sweep(a)?, a.format),
    }
}

fn render(r: &Report, format: Format) -> anyhow::Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(r)? + "\n",
        Format::Csv => r.render_csv()?,
        Format::Table => r.render_table(),
    })
}

fn render_sweep(r: &SweepReport, format: Format) -> anyhow::Result<String> {
    let (h, b) = report::sweep_table(&r.rows);
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(r)? + "\n",
        Format::Csv => report::to_csv(&h, &b)?,
        Format::Table => report::to_text(&h, &b),
    })
}

fn fit_model(a: &ModelArgs) -> Result<VglmFit, Failure> {
    if !(a.fd_step > 0.0 && a.fd_step.is_finite()) {
        return Err(Failure::Config(format!("finite-difference step must be positive, got {}", a.fd_step)));
    }
    let spec = data::load_model(a)?;
    let fit = fit_irls(&spec, None, &IrlsOptions::default())?;
    if fit.status == FitStatus::NotConverged {
        return Err(Failure::Convergence(format!("IRLS did not converge after {} iterations", fit.iterations)));
    }
    Ok(fit)
}

fn null_values(a: &ModelArgs, p: usize) -> Result<Vec<f64>, Failure> {
    match a.beta0.len() {
        0 => Ok(vec![0.0; p]),
        1 => Ok(vec![a.beta0[0]; p]),
        k if k == p => Ok(a.beta0.clone()),
        k => Err(Failure::Config(format!("{k} null values given for {p} coefficients"))),
    }
}

fn base_report(command: &str, a: &ModelArgs, fit: &VglmFit, beta0: &[f64]) -> Report {
    let coefficients = (0..fit.p())
        .map(|s| {
            let t = wald_test(fit, s, beta0[s]).expect("index in range");
            CoefRow {
                name: fit.names()[s].clone(),
                estimate: fit.beta[s],
                se: fit.se(s),
                wald: (fit.beta[s] - beta0[s]) / fit.se(s),
                p_value: t.p_value,
            }
        })
        .collect();
    Report {
        model: ModelInfo {
            command: command.to_string(),
            family: fit.design.family.to_string(),
            n: fit.design.n,
            p: fit.p(),
            m: fit.design.m,
            loglik: fit.loglik,
            iterations: fit.iterations,
            status: fit.status,
            fd_step: a.fd_step,
            recommendation: None,
        },
        coefficients,
        hde: Vec::new(),
        tests: Vec::new(),
        warnings: fit.warnings.clone(),
        timing: None,
    }
}

fn hde_rows(a: &ModelArgs, fit: &VglmFit, beta0: &[f64]) -> Result<Vec<HdeOut>, Failure> {
    let rows = hde_table(fit, beta0, MethodChoice::from(a.method), a.fd_step)?;
    Ok(rows
        .into_iter()
        .map(|r| HdeOut {
            se_d1: r.se_d1(),
            se_d2: r.se_d2(),
            name: r.name,
            estimate: r.estimate,
            beta0: r.beta0,
            se: r.se,
            wald: r.wald,
            d_wald: r.d_wald,
            d2_wald: r.d2_wald,
            zeta_prime: r.zeta_prime,
            hde: r.hde,
            severity: r.severity,
            method: r.method,
        })
        .collect())
}

pub fn cmd_fit(a: &ModelArgs) -> Result<Report, Failure> {
    let fit = fit_model(a)?;
    let beta0 = null_values(a, fit.p())?;
    Ok(base_report("fit", a, &fit, &beta0))
}

pub fn cmd_hde(a: &ModelArgs) -> Result<Report, Failure> {
    let fit = fit_model(a)?;
    let beta0 = null_values(a, fit.p())?;
    let mut r = base_report("hde", a, &fit, &beta0);
    r.hde = hde_rows(a, &fit, &beta0)?;
    Ok(r)
}

fn timed<T>(acc: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *acc += t.elapsed().as_secs_f64();
    out
}

pub fn cmd_tests(t: &TestsArgs) -> Result<Report, Failure> {
    let a = &t.model;
    let fit = fit_model(a)?;
    let beta0 = null_values(a, fit.p())?;
    let mut r = base_report("tests", a, &fit, &beta0);
    let mut clock = Timing { detection: 0.0, hde_free: 0.0, hde_free_iter: 0.0, lrt: 0.0, score: 0.0 };
    let hde = {
        let mut acc = 0.0;
        let rows = timed(&mut acc, || hde_rows(a, &fit, &beta0))?;
        clock.detection = acc;
        rows
    };
    let mut warnings = Vec::new();
    let mut note = |name: &str, what: &str, e: hdekit_core::Error| -> Option<f64> {
        warnings.push(format!("{name}: {what} unavailable: {e}"));
        None
    };
    for (s, h) in hde.iter().enumerate() {
        let name = fit.names()[s].clone();
        let b0 = beta0[s];
        let w = wald_test(&fit, s, b0)?;
        let hf = timed(&mut clock.hde_free, || hde_free_wald(&fit, s, b0, false));
        let hf = hf.map(|x| x.test.p_value).map_or_else(|e| note(&name, "HDE-free Wald", e), Some);
        let hfi = timed(&mut clock.hde_free_iter, || hde_free_wald(&fit, s, b0, true));
        let hfi = hfi.map(|x| x.test.p_value).map_or_else(|e| note(&name, "iterated HDE-free Wald", e), Some);
        let l = timed(&mut clock.lrt, || lrt(&fit, s, b0));
        let sc = timed(&mut clock.score, || score_test(&fit, s, b0, InfoAt::Null));
        // ratios use the score statistic with the information at the MLE
        let sm = score_test(&fit, s, b0, InfoAt::Mle);
        let ratios = match (&l, &sm) {
            (Ok(l), Ok(sm)) => Some(tipping_ratios(w.statistic, l.statistic, sm.statistic)?),
            _ => None,
        };
        let lrt_p = l.map(|x| x.p_value).map_or_else(|e| note(&name, "LRT", e), Some);
        let score_p = sc.map(|x| x.p_value).map_or_else(|e| note(&name, "score test", e), Some);
        let recommendation = if h.hde {
            "HDE: use the LRT, then the HDE-free Wald test, then the score test".to_string()
        } else {
            "Wald reliable".to_string()
        };
        r.tests.push(TestsOut {
            name,
            beta0: b0,
            hde: h.hde,
            wald_p: w.p_value,
            hde_free_p: hf,
            hde_free_iter_p: hfi,
            lrt_p,
            score_p,
            wald_over_lrt: ratios.and_then(|x| x.wald_over_lrt),
            wald_over_score: ratios.and_then(|x| x.wald_over_score),
            lrt_tipping: ratios.is_some_and(|x| x.lrt_tipping),
            score_tipping: ratios.is_some_and(|x| x.score_tipping),
            recommendation,
        });
    }
    let flagged: Vec<&str> = r.tests.iter().filter(|x| x.hde).map(|x| x.name.as_str()).collect();
    r.model.recommendation = Some(if flagged.is_empty() {
        "Wald table reliable".to_string()
    } else {
        format!(
            "HDE detected for {}: use LRT p-values, then HDE-free Wald, then score tests for these coefficients",
            flagged.join(", ")
        )
    });
    r.warnings.extend(warnings);
    r.hde = hde;
    if t.timing {
        r.timing = Some(clock);
    }
    Ok(r)
}

pub fn scenario(a: &SweepArgs) -> Result<Scenario, Failure> {
    let kind = a.kind().map_err(Failure::Config)?;
    let whole = |x: f64, what: &str| -> Result<f64, Failure> {
        if x >= 1.0 && x.fract() == 0.0 {
            Ok(x)
        } else {
            Err(Failure::Config(format!("{what} must be a positive integer, got {x}")))
        }
    };
    Ok(match kind {
        ScenarioKind::Hd2x2 => Scenario::Hd2x2 { n: whole(a.n.unwrap_or(100.0), "--n")? as u32, r0: a.r0.unwrap_or(25) },
        ScenarioKind::Qsep => Scenario::Qsep { n: whole(a.n.unwrap_or(50.0), "--n")? as usize },
        ScenarioKind::Poisson2 => {
            Scenario::Poisson2 { mu0: a.mu0.unwrap_or(20.0), n: a.n.unwrap_or(1.0), mu1_max: a.mu1_max.unwrap_or(20) }
        }
    })
}

/// Grid points are fitted in parallel; rows come back in grid order.
pub fn cmd_sweep(a: &SweepArgs) -> Result<SweepReport, Failure> {
    if !(a.fd_step > 0.0 && a.fd_step.is_finite()) {
        return Err(Failure::Config(format!("finite-difference step must be positive, got {}", a.fd_step)));
    }
    let sc = scenario(a)?;
    let grid = sc.grid().map_err(|e| Failure::Config(e.to_string()))?;
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, (g, spec))| sweep_row(i, *g, spec, 1, 0.0, a.fd_step))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepReport { scenario: format!("{sc:?}"), seed: a.seed, fd_step: a.fd_step, rows })
}
