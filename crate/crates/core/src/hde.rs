//! Derivatives of signed-root Wald statistics, the aberration test and
//! severity grading.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{working_weight, working_weight_deta, working_weight_deta2_scalar};
use crate::numkit::{invert_spd, Matrix};
use crate::stats::normal_pdf;
use crate::vglm::VglmFit;

/// Default finite-difference step on the η scale.
pub const DEFAULT_FD_STEP: f64 = 0.005;
pub const DEFAULT_SIGN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivMethod {
    Analytic,
    FiniteDifference,
}

/// How to obtain derivatives for a table: `Auto` is analytic for one linear
/// predictor and finite differences otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Auto,
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    None,
    Faint,
    Weak,
    Moderate,
    Strong,
    Extreme,
    Anomalous,
}

impl Severity {
    /// Position in the ordering None..Extreme.
    pub fn level(self) -> Option<u8> {
        match self {
            Severity::Anomalous => None,
            s => Some(s as u8),
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdeRow {
    pub s: usize,
    pub name: String,
    pub estimate: f64,
    pub beta0: f64,
    pub se: f64,
    pub wald: f64,
    pub d_wald: f64,
    pub d2_wald: f64,
    pub a_ss_d1: f64,
    pub a_ss_d2: f64,
    pub zeta_prime: f64,
    pub hde: bool,
    pub severity: Severity,
    pub method: DerivMethod,
}

impl HdeRow {
    /// `(√a^{ss})′`.
    pub fn se_d1(&self) -> f64 {
        self.a_ss_d1 / (2.0 * self.se)
    }

    /// `(√a^{ss})″`.
    pub fn se_d2(&self) -> f64 {
        let a = self.se * self.se;
        self.a_ss_d2 / (2.0 * self.se) - self.a_ss_d1 * self.a_ss_d1 / (4.0 * a * self.se)
    }

    /// `ζ = β̂ + W̃·W̃′`.
    pub fn zeta(&self) -> f64 {
        self.estimate + self.wald * self.d_wald
    }
}

/// Per-observation derivatives of the working weights with respect to η.
#[derive(Debug, Clone)]
pub struct WeightDerivs {
    /// `first[i][j] = ∂W_i/∂η_j`.
    pub first: Vec<Vec<Matrix>>,
    /// `second[i][t][j] = ∂²W_i/∂η_t∂η_j`, when available.
    pub second: Option<Vec<Vec<Vec<Matrix>>>>,
    pub method: DerivMethod,
}

/// Analytic weight derivatives. Second order only for one linear predictor.
pub fn weight_derivs_analytic(fit: &VglmFit) -> Result<WeightDerivs> {
    let d = &fit.design;
    let mut first = Vec::with_capacity(d.n);
    let mut second = if d.m == 1 { Some(Vec::with_capacity(d.n)) } else { None };
    for i in 0..d.n {
        let theta = fit.theta(i);
        let b = d.family.eim_bundle(&theta, d.w[i])?;
        first.push(working_weight_deta(&fit.links[i], &b));
        if let Some(sec) = second.as_mut() {
            let v = working_weight_deta2_scalar(&fit.links[i][0], &b);
            sec.push(vec![vec![Matrix::from_diag(&[v])]]);
        }
    }
    Ok(WeightDerivs { first, second, method: DerivMethod::Analytic })
}

fn weight_at(fit: &VglmFit, i: usize, eta: &[f64]) -> Result<Matrix> {
    let f = &fit.design.family;
    let b = f.links_at(eta)?;
    let theta: Vec<f64> = b.iter().map(|x| x.theta).collect();
    Ok(working_weight(&b, &f.eim(&theta, fit.design.w[i])?))
}

fn fd_one(fit: &VglmFit, i: usize, h: f64) -> Result<(Vec<Matrix>, Vec<Vec<Matrix>>)> {
    let m = fit.design.m;
    let eta0 = &fit.eta[i * m..(i + 1) * m];
    let at = |shift: &[(usize, f64)]| -> Result<Matrix> {
        let mut e = eta0.to_vec();
        for &(j, v) in shift {
            e[j] += v;
        }
        weight_at(fit, i, &e)
    };
    let w0 = at(&[])?;
    let mut first = Vec::with_capacity(m);
    let mut second = vec![vec![Matrix::zeros(m, m); m]; m];
    for j in 0..m {
        let wp = at(&[(j, h)])?;
        let wm = at(&[(j, -h)])?;
        first.push((&wp - &wm).scale(0.5 / h));
        let mut d2 = &wp + &wm;
        d2.axpy(-2.0, &w0);
        second[j][j] = d2.scale(1.0 / (h * h));
    }
    for t in 0..m {
        for j in t + 1..m {
            let mut d = at(&[(t, h), (j, h)])?;
            d.axpy(-1.0, &at(&[(t, h), (j, -h)])?);
            d.axpy(-1.0, &at(&[(t, -h), (j, h)])?);
            d.axpy(1.0, &at(&[(t, -h), (j, -h)])?);
            let d = d.scale(0.25 / (h * h));
            second[t][j] = d.clone();
            second[j][t] = d;
        }
    }
    Ok((first, second))
}

/// Central differences of the working weights on the η scale. The step is
/// halved up to 5 times if a perturbed η leaves the parameter space.
pub fn weight_derivs_fd(fit: &VglmFit, h: f64) -> Result<WeightDerivs> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step {h} must be positive")));
    }
    let mut step = h;
    for _ in 0..=5 {
        let res: Result<Vec<_>> = (0..fit.design.n).map(|i| fd_one(fit, i, step)).collect();
        match res {
            Ok(parts) => {
                let (first, second) = parts.into_iter().unzip();
                return Ok(WeightDerivs { first, second: Some(second), method: DerivMethod::FiniteDifference });
            }
            Err(Error::Domain(_)) | Err(Error::OrderViolation) => step *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(Error::StepTooLarge)
}

fn check_index(fit: &VglmFit, s: usize) -> Result<()> {
    if s >= fit.p() {
        return Err(Error::ShapeMismatch(format!("coefficient {s} out of range (p = {})", fit.p())));
    }
    Ok(())
}

/// `∂^order A/∂β_s^order` from precomputed weight derivatives.
pub fn da_from_weight_derivs(fit: &VglmFit, wd: &WeightDerivs, s: usize, order: u8) -> Result<Matrix> {
    check_index(fit, s)?;
    let d = &fit.design;
    let (p, m) = (d.p(), d.m);
    let mut out = Matrix::zeros(p, p);
    for i in 0..d.n {
        let xi = d.block(i);
        let xs: Vec<f64> = (0..m).map(|j| xi[(j, s)]).collect();
        if xs.iter().all(|v| *v == 0.0) {
            continue;
        }
        let mut dw = Matrix::zeros(m, m);
        match order {
            1 => {
                for (j, x) in xs.iter().enumerate() {
                    if *x != 0.0 {
                        dw.axpy(*x, &wd.first[i][j]);
                    }
                }
            }
            2 => {
                let sec = wd.second.as_ref().ok_or_else(|| {
                    Error::Unsupported("analytic second derivatives need M = 1; use finite differences".into())
                })?;
                for t in 0..m {
                    for j in 0..m {
                        let c = xs[t] * xs[j];
                        if c != 0.0 {
                            dw.axpy(c, &sec[i][t][j]);
                        }
                    }
                }
            }
            _ => return Err(Error::Unsupported(format!("derivative order {order}"))),
        }
        let q = &(&xi.transpose() * &dw) * &xi;
        out.axpy(1.0, &q);
    }
    out.symmetrize();
    Ok(out)
}

/// `∂^order A/∂β_s^order` from analytic EIM derivatives.
pub fn da_dbeta_analytic(fit: &VglmFit, s: usize, order: u8) -> Result<Matrix> {
    if order == 2 && fit.design.m > 1 {
        return Err(Error::Unsupported("analytic second derivatives need M = 1; use finite differences".into()));
    }
    da_from_weight_derivs(fit, &weight_derivs_analytic(fit)?, s, order)
}

/// `∂A⁻¹/∂β = −A⁻¹ dA A⁻¹`.
pub fn dainv_dbeta(a: &Matrix, da: &Matrix) -> Result<Matrix> {
    let ai = invert_spd(a)?;
    Ok((&(&ai * da) * &ai).scale(-1.0))
}

/// `∂²A⁻¹/∂β² = A⁻¹[2 dA A⁻¹ dA − d2A]A⁻¹`.
pub fn d2ainv_dbeta2(a: &Matrix, da: &Matrix, d2a: &Matrix) -> Result<Matrix> {
    let ai = invert_spd(a)?;
    let mut mid = (&(da * &ai) * da).scale(2.0);
    mid.axpy(-1.0, d2a);
    Ok(&(&ai * &mid) * &ai)
}

/// `(a^{ss}, (a^{ss})′, (a^{ss})″)` from `A⁻¹` and the derivatives of `A`.
pub fn a_ss_derivs(a_inv: &Matrix, s: usize, da: &Matrix, d2a: Option<&Matrix>) -> (f64, f64, Option<f64>) {
    let v = a_inv.column(s);
    let dav = da.mat_vec(&v).unwrap();
    let a1 = -crate::numkit::dot(&v, &dav);
    let a2 = d2a.map(|d2| 2.0 * a_inv.bilinear(&dav, &dav) - d2.bilinear(&v, &v));
    (a_inv[(s, s)], a1, a2)
}

/// `(W̃′, W̃″)` given `b = β̂ − β₀` and the derivatives of `a^{ss}`.
pub fn wald_slopes(b: f64, a: f64, a1: f64, a2: f64) -> (f64, f64) {
    let d = (1.0 - 0.5 * b * a1 / a) / a.sqrt();
    let d2 = (-a1 + 0.5 * b * (1.5 * a1 * a1 / a - a2)) / (a * a.sqrt());
    (d, d2)
}

/// Analytic `(W̃′, W̃″)`; the second derivative needs M = 1.
pub fn wald_derivs(fit: &VglmFit, s: usize, beta0: f64) -> Result<(f64, f64)> {
    check_index(fit, s)?;
    let wd = weight_derivs_analytic(fit)?;
    let da = da_from_weight_derivs(fit, &wd, s, 1)?;
    let d2a = da_from_weight_derivs(fit, &wd, s, 2)?;
    let (a, a1, a2) = a_ss_derivs(&fit.a_inv, s, &da, Some(&d2a));
    Ok(wald_slopes(fit.beta[s] - beta0, a, a1, a2.unwrap()))
}

/// `(W̃′, W̃″)` from finite differences of the working weights.
pub fn dw_finite_difference(fit: &VglmFit, s: usize, beta0: f64, h: f64) -> Result<(f64, f64)> {
    check_index(fit, s)?;
    let wd = weight_derivs_fd(fit, h)?;
    let da = da_from_weight_derivs(fit, &wd, s, 1)?;
    let d2a = da_from_weight_derivs(fit, &wd, s, 2)?;
    let (a, a1, a2) = a_ss_derivs(&fit.a_inv, s, &da, Some(&d2a));
    Ok(wald_slopes(fit.beta[s] - beta0, a, a1, a2.unwrap()))
}

/// Whether the Wald statistic for coefficient `s` is aberrant at the MLE.
pub fn detect(fit: &VglmFit, s: usize, beta0: f64) -> Result<bool> {
    check_index(fit, s)?;
    let da = da_dbeta_analytic(fit, s, 1)?;
    let (a, a1, _) = a_ss_derivs(&fit.a_inv, s, &da, None);
    let b = fit.beta[s] - beta0;
    let by_slope = wald_slopes(b, a, a1, 0.0).0 < 0.0;
    // same condition written as ½ b d log a/dβ − 1 > 0
    let by_log = 0.5 * b * a1 / a - 1.0 > 0.0;
    debug_assert_eq!(by_slope, by_log);
    Ok(by_slope)
}

fn sign(x: f64, tol: f64) -> i8 {
    if x.abs() <= tol {
        0
    } else if x > 0.0 {
        1
    } else {
        -1
    }
}

fn table_lookup(t: (i8, i8, i8)) -> Option<Severity> {
    match t {
        (1, 1, 1) => Some(Severity::None),
        (1, -1, 1) => Some(Severity::Faint),
        (1, -1, -1) => Some(Severity::Weak),
        (-1, -1, -1) => Some(Severity::Moderate),
        (-1, -1, 1) => Some(Severity::Strong),
        (-1, 1, 1) => Some(Severity::Extreme),
        _ => None,
    }
}

/// Grade by the signs of `(W̃′, sgn(β̂−β₀)·W̃″, ζ′)`. Near-zero components take
/// whichever sign gives the milder category. At the null itself the
/// concave side decides, unless `W̃″` also vanishes.
pub fn classify_severity(row: &HdeRow, sign_tol: f64) -> Severity {
    let s1 = sign(row.d_wald, sign_tol);
    let side = sign(row.wald, sign_tol);
    let s2 = if side == 0 {
        if sign(row.d2_wald, sign_tol) == 0 {
            0
        } else {
            -1
        }
    } else {
        sign(f64::from(side) * row.d2_wald, sign_tol)
    };
    let s3 = sign(row.zeta_prime, sign_tol);
    let opts = |v: i8| if v == 0 { vec![1, -1] } else { vec![v] };
    let mut best: Option<Severity> = None;
    for a in opts(s1) {
        for b in opts(s2) {
            for c in opts(s3) {
                if let Some(sev) = table_lookup((a, b, c)) {
                    best = Some(best.map_or(sev, |x| x.min(sev)));
                }
            }
        }
    }
    best.unwrap_or(Severity::Anomalous)
}

/// `∂p/∂β̂ = −2φ(W̃) sgn(W̃) W̃′` for the two-sided p-value.
pub fn pvalue_derivative(row: &HdeRow) -> f64 {
    let sg = if row.wald > 0.0 {
        1.0
    } else if row.wald < 0.0 {
        -1.0
    } else {
        0.0
    };
    -2.0 * normal_pdf(row.wald) * sg * row.d_wald
}

fn make_row(fit: &VglmFit, s: usize, beta0: f64, a1: f64, a2: f64, method: DerivMethod) -> HdeRow {
    let a = fit.a_inv[(s, s)];
    let se = a.sqrt();
    let b = fit.beta[s] - beta0;
    let wald = b / se;
    let (d, d2) = wald_slopes(b, a, a1, a2);
    let mut row = HdeRow {
        s,
        name: fit.names()[s].clone(),
        estimate: fit.beta[s],
        beta0,
        se,
        wald,
        d_wald: d,
        d2_wald: d2,
        a_ss_d1: a1,
        a_ss_d2: a2,
        zeta_prime: 1.0 + d * d + wald * d2,
        hde: d < 0.0,
        severity: Severity::None,
        method,
    };
    row.severity = classify_severity(&row, DEFAULT_SIGN_TOL);
    row
}

/// Diagnostics for every coefficient. `beta0` holds one null value per coefficient.
pub fn hde_table(fit: &VglmFit, beta0: &[f64], method: MethodChoice, h: f64) -> Result<Vec<HdeRow>> {
    if beta0.len() != fit.p() {
        return Err(Error::ShapeMismatch(format!("{} null values for {} coefficients", beta0.len(), fit.p())));
    }
    let wd = match (method, fit.design.m) {
        (MethodChoice::Auto, 1) | (MethodChoice::Analytic, 1) => weight_derivs_analytic(fit)?,
        (MethodChoice::Analytic, _) => {
            return Err(Error::Unsupported("analytic second derivatives need M = 1; use finite differences".into()))
        }
        _ => weight_derivs_fd(fit, h)?,
    };
    (0..fit.p())
        .map(|s| {
            let da = da_from_weight_derivs(fit, &wd, s, 1)?;
            let d2a = da_from_weight_derivs(fit, &wd, s, 2)?;
            let (_, a1, a2) = a_ss_derivs(&fit.a_inv, s, &da, Some(&d2a));
            Ok(make_row(fit, s, beta0[s], a1, a2.unwrap(), wd.method))
        })
        .collect()
}

/// Diagnostics for one coefficient.
pub fn hde_row(fit: &VglmFit, s: usize, beta0: f64, method: MethodChoice, h: f64) -> Result<HdeRow> {
    check_index(fit, s)?;
    let mut b0 = fit.beta.clone();
    b0[s] = beta0;
    Ok(hde_table(fit, &b0, method, h)?.swap_remove(s))
}
