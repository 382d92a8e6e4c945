//! Report types and their JSON, CSV and plain-table renderings.

use serde::{Deserialize, Serialize};

use hdekit_core::hde::{DerivMethod, Severity};
use hdekit_core::scenarios::SweepRow;
use hdekit_core::vglm::FitStatus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub command: String,
    pub family: String,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub loglik: f64,
    pub iterations: usize,
    pub status: FitStatus,
    pub fd_step: f64,
    /// Overall advice from `tests`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendation: Option<String>,
}

/// One row of the Wald table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub wald: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdeOut {
    pub name: String,
    pub estimate: f64,
    pub beta0: f64,
    pub se: f64,
    pub wald: f64,
    pub d_wald: f64,
    pub d2_wald: f64,
    pub se_d1: f64,
    pub se_d2: f64,
    pub zeta_prime: f64,
    pub hde: bool,
    pub severity: Severity,
    pub method: DerivMethod,
}

/// Alternative tests for one coefficient. `None` marks a test that could not
/// be computed; the reason is in the warnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestsOut {
    pub name: String,
    pub beta0: f64,
    pub hde: bool,
    pub wald_p: f64,
    pub hde_free_p: Option<f64>,
    pub hde_free_iter_p: Option<f64>,
    pub lrt_p: Option<f64>,
    pub score_p: Option<f64>,
    pub wald_over_lrt: Option<f64>,
    pub wald_over_score: Option<f64>,
    pub lrt_tipping: bool,
    pub score_tipping: bool,
    pub recommendation: String,
}

/// Wall-clock seconds per procedure, summed over coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub detection: f64,
    pub hde_free: f64,
    pub hde_free_iter: f64,
    pub lrt: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: ModelInfo,
    pub coefficients: Vec<CoefRow>,
    pub hde: Vec<HdeOut>,
    pub tests: Vec<TestsOut>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub scenario: String,
    pub seed: u64,
    pub fd_step: f64,
    pub rows: Vec<SweepRow>,
}

/// `%.{digits}g`-style formatting.
pub fn fmt_g(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mant = trim_zeros(mant);
        return format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn num(x: f64) -> String {
    fmt_g(x, 12)
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn method_name(m: DerivMethod) -> &'static str {
    match m {
        DerivMethod::Analytic => "analytic",
        DerivMethod::FiniteDifference => "finite-difference",
    }
}

fn status_name(s: FitStatus) -> &'static str {
    match s {
        FitStatus::Converged => "converged",
        FitStatus::DivergedToBoundary => "diverged-to-boundary",
        FitStatus::NotConverged => "not-converged",
        FitStatus::Evaluated => "evaluated",
    }
}

pub fn coef_table(rows: &[CoefRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let head = vec!["name", "estimate", "se", "wald", "p_value"];
    let body = rows.iter().map(|r| vec![r.name.clone(), num(r.estimate), num(r.se), num(r.wald), num(r.p_value)]).collect();
    (head, body)
}

pub fn hde_table(rows: &[HdeOut]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let head = vec![
        "name", "estimate", "se", "wald", "d_wald", "d2_wald", "se_d1", "se_d2", "zeta_prime", "hde", "severity", "method",
    ];
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                num(r.estimate),
                num(r.se),
                num(r.wald),
                num(r.d_wald),
                num(r.d2_wald),
                num(r.se_d1),
                num(r.se_d2),
                num(r.zeta_prime),
                r.hde.to_string(),
                r.severity.to_string(),
                method_name(r.method).to_string(),
            ]
        })
        .collect();
    (head, body)
}

pub fn tests_table(rows: &[TestsOut]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let head = vec![
        "name",
        "hde",
        "wald_p",
        "hde_free_p",
        "hde_free_iter_p",
        "lrt_p",
        "score_p",
        "wald_over_lrt",
        "wald_over_score",
        "lrt_tipping",
        "score_tipping",
        "recommendation",
    ];
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.hde.to_string(),
                num(r.wald_p),
                opt(r.hde_free_p),
                opt(r.hde_free_iter_p),
                opt(r.lrt_p),
                opt(r.score_p),
                opt(r.wald_over_lrt),
                opt(r.wald_over_score),
                r.lrt_tipping.to_string(),
                r.score_tipping.to_string(),
                r.recommendation.clone(),
            ]
        })
        .collect();
    (head, body)
}

pub fn sweep_table(rows: &[SweepRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let head = vec![
        "index",
        "grid",
        "status",
        "estimate",
        "se",
        "wald",
        "d_wald",
        "d2_wald",
        "zeta_prime",
        "hde",
        "severity",
        "lrt",
        "score",
        "wald_over_lrt",
        "wald_over_score",
    ];
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                num(r.grid),
                status_name(r.status).to_string(),
                num(r.estimate),
                num(r.se),
                num(r.wald),
                num(r.d_wald),
                num(r.d2_wald),
                num(r.zeta_prime),
                r.hde.to_string(),
                r.severity.to_string(),
                num(r.lrt),
                num(r.score),
                opt(r.wald_over_lrt),
                opt(r.wald_over_score),
            ]
        })
        .collect();
    (head, body)
}

pub fn to_csv(head: &[&str], body: &[Vec<String>]) -> anyhow::Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(head)?;
    for row in body {
        w.write_record(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Left-aligned text columns separated by two spaces.
pub fn to_text(head: &[&str], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
    for row in body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(head.to_vec());
    for row in body {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

impl Report {
    pub fn render_table(&self) -> String {
        let m = &self.model;
        let mut out = format!(
            "family: {}\nn = {}, coefficients = {}, log-likelihood = {}, iterations = {} ({})\n\n",
            m.family,
            m.n,
            m.p,
            num(m.loglik),
            m.iterations,
            status_name(m.status)
        );
        let (h, b) = coef_table(&self.coefficients);
        out += &to_text(&h, &b);
        if !self.hde.is_empty() {
            let (h, b) = hde_table(&self.hde);
            out += "\n";
            out += &to_text(&h, &b);
        }
        if !self.tests.is_empty() {
            let (h, b) = tests_table(&self.tests);
            out += "\n";
            out += &to_text(&h, &b);
        }
        if let Some(r) = &m.recommendation {
            out += &format!("\n{r}\n");
        }
        if let Some(t) = &self.timing {
            let rel = |x: f64| if t.lrt > 0.0 { format!(" ({:.2} x LRT)", x / t.lrt) } else { String::new() };
            out += &format!(
                "\ntiming (s): detection {:.3e}{}, HDE-free {:.3e}{}, HDE-free iterated {:.3e}{}, LRT {:.3e}, score {:.3e}{}\n",
                t.detection,
                rel(t.detection),
                t.hde_free,
                rel(t.hde_free),
                t.hde_free_iter,
                rel(t.hde_free_iter),
                t.lrt,
                t.score,
                rel(t.score)
            );
        }
        for w in &self.warnings {
            out += &format!("warning: {w}\n");
        }
        out
    }

    /// The command's main table as CSV.
    pub fn render_csv(&self) -> anyhow::Result<String> {
        let (h, b) = match self.model.command.as_str() {
            "hde" => hde_table(&self.hde),
            "tests" => tests_table(&self.tests),
            _ => coef_table(&self.coefficients),
        };
        to_csv(&h, &b)
    }
}
