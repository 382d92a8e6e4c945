//! Parameter-space sweeps over small synthetic designs, one row per grid point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::Family;
use crate::hde::{hde_row, MethodChoice, Severity, DEFAULT_FD_STEP};
use crate::links::LinkKind;
use crate::numkit::Matrix;
use crate::tables2x2::{poisson_two_group_spec, TwoByTwo};
use crate::tests_alt::{lrt, score_test, tipping_ratios, wald_test, InfoAt};
use crate::vglm::{fit_irls, FitStatus, IrlsOptions, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Hd2x2,
    Qsep,
    Poisson2,
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hd2x2" => Ok(Self::Hd2x2),
            "qsep" => Ok(Self::Qsep),
            "poisson2" => Ok(Self::Poisson2),
            _ => Err(Error::Unsupported(format!("scenario '{s}'"))),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hd2x2 => "hd2x2",
            Self::Qsep => "qsep",
            Self::Poisson2 => "poisson2",
        })
    }
}

/// A sweep and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    /// Group size `n`, fixed baseline count `r0`; grid `R = 1..n-1`.
    Hd2x2 { n: u32, r0: u32 },
    /// `n` points in total (even); grid is the number of responses flipped.
    Qsep { n: usize },
    /// Baseline mean `mu0`, replicates `n`; grid `mu1 = 1..=mu1_max`.
    Poisson2 { mu0: f64, n: f64, mu1_max: u32 },
}

impl Scenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Scenario::Hd2x2 { .. } => ScenarioKind::Hd2x2,
            Scenario::Qsep { .. } => ScenarioKind::Qsep,
            Scenario::Poisson2 { .. } => ScenarioKind::Poisson2,
        }
    }

    /// Grid values paired with the model to fit there.
    pub fn grid(&self) -> Result<Vec<(f64, ModelSpec)>> {
        match *self {
            Scenario::Hd2x2 { n, r0 } => {
                if n < 2 || r0 == 0 || r0 >= n {
                    return Err(Error::Domain(format!("need 0 < r0 < n, got n = {n}, r0 = {r0}")));
                }
                (1..n)
                    .map(|r| {
                        let t = TwoByTwo::hd(f64::from(n), f64::from(r0), f64::from(r))?;
                        Ok((f64::from(r), t.model_spec()))
                    })
                    .collect()
            }
            Scenario::Qsep { n } => {
                let steps = qsep_steps(n)?;
                (0..=steps).map(|j| Ok((j as f64, qsep_dataset(n, j)?))).collect()
            }
            Scenario::Poisson2 { mu0, n, mu1_max } => {
                if !(mu0 > 0.0 && n > 0.0) || mu1_max == 0 {
                    return Err(Error::Domain("poisson2 needs mu0 > 0, n > 0, mu1_max >= 1".into()));
                }
                Ok((1..=mu1_max).map(|m| (f64::from(m), poisson_two_group_spec(mu0, f64::from(m), n))).collect())
            }
        }
    }
}

fn qsep_steps(n: usize) -> Result<usize> {
    if n < 6 || n % 2 != 0 {
        return Err(Error::Domain(format!("qsep needs an even n >= 6, got {n}")));
    }
    // 2N-1 points on [0,1] plus one at 1/2; N-1 of them lie right of 1/2
    Ok(n / 2 - 2)
}

/// Points `x = (i-1)/(2N-2)`, `i = 1..2N-1`, all with `y = 0`, plus `(1/2, 1)`,
/// where `2N = n`. The first `flipped` points right of 1/2 have `y = 1`; the
/// rightmost is never flipped.
pub fn qsep_dataset(n: usize, flipped: usize) -> Result<ModelSpec> {
    let steps = qsep_steps(n)?;
    if flipped > steps {
        return Err(Error::Domain(format!("at most {steps} responses can be flipped, got {flipped}")));
    }
    let big_n = n / 2;
    let count = 2 * big_n - 1;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..count {
        rows.push(vec![1.0, i as f64 / (count - 1) as f64]);
        // indices big_n.. lie right of 1/2
        y.push(if i >= big_n && i < big_n + flipped { 1.0 } else { 0.0 });
    }
    rows.push(vec![1.0, 0.5]);
    y.push(1.0);
    Ok(ModelSpec::new(Family::binomial(LinkKind::Logit), Matrix::from_rows(&rows)?, y).with_names(vec!["(Intercept)", "x2"]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub grid: f64,
    pub status: FitStatus,
    pub estimate: f64,
    pub se: f64,
    pub wald: f64,
    pub d_wald: f64,
    pub d2_wald: f64,
    pub zeta_prime: f64,
    pub hde: bool,
    pub severity: Severity,
    pub lrt: f64,
    pub score: f64,
    /// `None` when the denominator is zero.
    pub wald_over_lrt: Option<f64>,
    pub wald_over_score: Option<f64>,
}

/// Fit one grid point and summarise coefficient `k` against `beta0`.
pub fn sweep_row(index: usize, grid: f64, spec: &ModelSpec, k: usize, beta0: f64, h: f64) -> Result<SweepRow> {
    let fit = fit_irls(spec, None, &IrlsOptions::default())?;
    if fit.status == FitStatus::NotConverged {
        return Err(Error::NotConverged(fit.iterations));
    }
    let row = hde_row(&fit, k, beta0, MethodChoice::Auto, h)?;
    let w = wald_test(&fit, k, beta0)?.statistic;
    let l = lrt(&fit, k, beta0)?.statistic;
    // information at the MLE, as in the tipping-point ratios
    let s = score_test(&fit, k, beta0, InfoAt::Mle)?.statistic;
    let r = tipping_ratios(w, l, s)?;
    Ok(SweepRow {
        index,
        grid,
        status: fit.status,
        estimate: row.estimate,
        se: row.se,
        wald: row.wald,
        d_wald: row.d_wald,
        d2_wald: row.d2_wald,
        zeta_prime: row.zeta_prime,
        hde: row.hde,
        severity: row.severity,
        lrt: l,
        score: s,
        wald_over_lrt: r.wald_over_lrt,
        wald_over_score: r.wald_over_score,
    })
}

/// The whole sweep for the slope coefficient, serially.
pub fn run_sweep(scenario: &Scenario) -> Result<Vec<SweepRow>> {
    scenario
        .grid()?
        .iter()
        .enumerate()
        .map(|(i, (g, spec))| sweep_row(i, *g, spec, 1, 0.0, DEFAULT_FD_STEP))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qsep_layout() {
        let spec = qsep_dataset(50, 0).unwrap();
        assert_eq!(spec.n(), 50);
        assert_eq!(spec.y.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(spec.x_lm[(48, 1)], 1.0);
        assert_eq!(spec.x_lm[(49, 1)], 0.5);
        assert_eq!(spec.x_lm[(24, 1)], 0.5);
        let full = qsep_dataset(50, 23).unwrap();
        // everything right of 1/2 flipped but the rightmost
        for i in 25..48 {
            assert_eq!(full.y[i], 1.0);
        }
        assert_eq!(full.y[48], 0.0);
        assert!(qsep_dataset(50, 24).is_err());
        assert!(qsep_dataset(7, 0).is_err());
    }

    #[test]
    fn qsep_wald_rises_then_falls() {
        let rows = run_sweep(&Scenario::Qsep { n: 50 }).unwrap();
        assert_eq!(rows.len(), 24);
        for w in rows.windows(2) {
            assert!(w[1].estimate > w[0].estimate);
        }
        let peak = rows.iter().enumerate().max_by(|a, b| a.1.wald.total_cmp(&b.1.wald)).unwrap().0;
        assert!(peak > 0 && peak < rows.len() - 1, "peak at {peak}");
        assert!(rows.last().unwrap().hde);
        assert!(!rows[0].hde);
    }

    #[test]
    fn hd_sweep_has_99_rows() {
        let rows = run_sweep(&Scenario::Hd2x2 { n: 100, r0: 25 }).unwrap();
        assert_eq!(rows.len(), 99);
        assert_eq!(rows[91].grid, 92.0);
        assert!(rows[91].hde && !rows[90].hde);
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("QSEP".parse::<ScenarioKind>().unwrap(), ScenarioKind::Qsep);
        assert!("nope".parse::<ScenarioKind>().is_err());
    }
}
