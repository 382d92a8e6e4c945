//! Tests that do not suffer from the aberration (likelihood ratio, score,
//! Wald with the SE taken at the null), ratios between them, sandwich
//! covariances, contrasts and profile information.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hde::{da_dbeta_analytic, da_from_weight_derivs, dainv_dbeta, weight_derivs_analytic};
use crate::numkit::{cholesky, invert_spd, invert_upper, qr, vstack, Matrix};
use crate::stats::chi2_sf;
use crate::vglm::{fit_design, floored, FitStatus, IrlsOptions, VglmFit, INFEASIBLE_START};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    Wald,
    WaldHdeFreeNoniter,
    WaldHdeFreeIter,
    Lrt,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    /// Name of the coefficient under test.
    pub name: String,
    pub beta0: f64,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub refit_iterations: usize,
}

impl TestResult {
    fn new(kind: TestKind, fit: &VglmFit, k: usize, beta0: f64, statistic: f64, refit_iterations: usize) -> Self {
        Self {
            kind,
            name: fit.names()[k].clone(),
            beta0,
            statistic,
            df: 1,
            p_value: chi2_sf(statistic, 1.0),
            refit_iterations,
        }
    }
}

/// Where the information matrix of the score test is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoAt {
    Null,
    Mle,
}

fn check_k(fit: &VglmFit, k: usize) -> Result<()> {
    if k >= fit.p() {
        return Err(Error::ShapeMismatch(format!("coefficient {k} out of range (p = {})", fit.p())));
    }
    Ok(())
}

fn insert(beta_minus_k: &[f64], k: usize, value: f64) -> Vec<f64> {
    let mut b = beta_minus_k.to_vec();
    b.insert(k, value);
    b
}

/// Refit with `β_k` fixed at `beta0`, starting from the unrestricted estimates.
pub fn constrained_fit(fit: &VglmFit, k: usize, beta0: f64, opts: &IrlsOptions) -> Result<VglmFit> {
    check_k(fit, k)?;
    let design = fit.design.drop_coefficient(k, beta0)?;
    let mut init = fit.beta.clone();
    init.remove(k);
    let refit = match fit_design(&design, Some(&init), opts) {
        Ok(r) if r.status != FitStatus::NotConverged => r,
        Ok(_) | Err(Error::Domain(_) | Error::OrderViolation) => continuation(fit, k, beta0, init, opts)?,
        Err(e) => return Err(e),
    };
    match refit.status {
        FitStatus::NotConverged => Err(Error::NotConverged(refit.iterations)),
        _ => Ok(refit),
    }
}

/// Move the fixed value from `β̂_k` to `beta0` in steps, warm-starting each
/// refit from the last one; used when the direct start is infeasible.
fn continuation(fit: &VglmFit, k: usize, beta0: f64, mut init: Vec<f64>, opts: &IrlsOptions) -> Result<VglmFit> {
    let from = fit.beta[k];
    let (mut t, mut step) = (0.0f64, 0.125f64);
    loop {
        let next = (t + step).min(1.0);
        let value = if next >= 1.0 { beta0 } else { from + next * (beta0 - from) };
        let design = fit.design.drop_coefficient(k, value)?;
        match fit_design(&design, Some(&init), opts) {
            Ok(r) if r.status != FitStatus::NotConverged && !r.warnings.iter().any(|w| w == INFEASIBLE_START) => {
                if next >= 1.0 {
                    return Ok(r);
                }
                init = r.beta;
                t = next;
                step = (2.0 * step).min(0.25);
            }
            Ok(_) | Err(Error::Domain(_) | Error::OrderViolation) if step > 1.0 / 1024.0 => step *= 0.5,
            Ok(r) => return Err(Error::NotConverged(r.iterations)),
            Err(e) => return Err(e),
        }
    }
}

/// Ordinary Wald test of `β_k = beta0`.
pub fn wald_test(fit: &VglmFit, k: usize, beta0: f64) -> Result<TestResult> {
    check_k(fit, k)?;
    let z = (fit.beta[k] - beta0) / fit.se(k);
    Ok(TestResult::new(TestKind::Wald, fit, k, beta0, z * z, 0))
}

/// Likelihood ratio test of `β_k = beta0`.
pub fn lrt(fit: &VglmFit, k: usize, beta0: f64) -> Result<TestResult> {
    lrt_with(fit, k, beta0, &IrlsOptions::default())
}

pub fn lrt_with(fit: &VglmFit, k: usize, beta0: f64, opts: &IrlsOptions) -> Result<TestResult> {
    let refit = constrained_fit(fit, k, beta0, opts)?;
    let stat = 2.0 * (fit.loglik - refit.loglik);
    if stat < -1e-6 * (1.0 + fit.loglik.abs()) {
        // the restricted fit beat the unrestricted one: the latter is not a maximum
        return Err(Error::NotConverged(fit.iterations));
    }
    // differences at rounding level are a zero statistic
    let stat = if stat <= 1e-12 * (1.0 + fit.loglik.abs()) { 0.0 } else { stat };
    Ok(TestResult::new(TestKind::Lrt, fit, k, beta0, stat, refit.iterations))
}

/// Rao score test of `β_k = beta0`. The score is taken at the restricted
/// estimates; the information either there or at the unrestricted MLE.
pub fn score_test(fit: &VglmFit, k: usize, beta0: f64, info_at: InfoAt) -> Result<TestResult> {
    let refit = constrained_fit(fit, k, beta0, &IrlsOptions::default())?;
    let at_null = VglmFit::at_coefficients(&fit.design, &insert(&refit.beta, k, beta0))?;
    let a_inv = match info_at {
        InfoAt::Null => &at_null.a_inv,
        InfoAt::Mle => &fit.a_inv,
    };
    let u = &at_null.score;
    let stat = a_inv.bilinear(u, u).max(0.0);
    Ok(TestResult::new(TestKind::Score, fit, k, beta0, stat, refit.iterations))
}

/// SE of coefficient `k` from the QR decomposition of the Cholesky-weighted
/// VLM design evaluated at `beta`.
pub fn se_via_qr(fit_at: &VglmFit, k: usize) -> Result<f64> {
    let d = &fit_at.design;
    let mut blocks = Vec::with_capacity(d.n);
    for (i, w) in fit_at.weights.iter().enumerate() {
        let u = cholesky(&floored(w))?.transpose();
        blocks.push(&u * &d.block(i));
    }
    let r = qr(&vstack(&blocks)?)?.r;
    let r_inv = invert_upper(&r)?;
    Ok(r_inv.row(k).iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdeFreeWald {
    pub test: TestResult,
    pub se: f64,
    /// Signed root `(β̂_k − β_{0k})/SE_k`.
    pub wald: f64,
    /// Derivative of the signed root in `β̂_k`; the SE does not move with it.
    pub slope: f64,
}

impl HdeFreeWald {
    pub fn hde(&self) -> bool {
        self.slope < 0.0
    }
}

/// Wald test with the SE evaluated at `β_k = beta0`, the other coefficients
/// either kept at their estimates or refitted under the restriction.
pub fn hde_free_wald(fit: &VglmFit, k: usize, beta0: f64, iterate: bool) -> Result<HdeFreeWald> {
    check_k(fit, k)?;
    let (others, iters, kind) = if iterate {
        let refit = constrained_fit(fit, k, beta0, &IrlsOptions::default())?;
        (refit.beta, refit.iterations, TestKind::WaldHdeFreeIter)
    } else {
        let mut b = fit.beta.clone();
        b.remove(k);
        (b, 0, TestKind::WaldHdeFreeNoniter)
    };
    let at = VglmFit::at_coefficients(&fit.design, &insert(&others, k, beta0))?;
    let se = se_via_qr(&at, k)?;
    let wald = (fit.beta[k] - beta0) / se;
    Ok(HdeFreeWald {
        test: TestResult::new(kind, fit, k, beta0, wald * wald, iters),
        se,
        wald,
        slope: 1.0 / se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioDiagnostics {
    /// `None` when the denominator is zero.
    pub wald_over_lrt: Option<f64>,
    pub wald_over_score: Option<f64>,
    pub lrt_over_score: Option<f64>,
    /// `W/W_L < 3/5`.
    pub lrt_tipping: bool,
    /// `W/W_S < 1/4`.
    pub score_tipping: bool,
    /// `W_L/W_S < 5/12`; advisory only.
    pub lrt_score_below_5_12: bool,
}

impl RatioDiagnostics {
    pub fn undefined(&self) -> bool {
        self.wald_over_lrt.is_none() || self.wald_over_score.is_none()
    }
}

pub fn tipping_ratios(w: f64, w_lrt: f64, w_score: f64) -> Result<RatioDiagnostics> {
    for (name, v) in [("Wald", w), ("LRT", w_lrt), ("score", w_score)] {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("{name} statistic {v} must be nonnegative")));
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
    let (rl, rs, ls) = (ratio(w, w_lrt), ratio(w, w_score), ratio(w_lrt, w_score));
    Ok(RatioDiagnostics {
        wald_over_lrt: rl,
        wald_over_score: rs,
        lrt_over_score: ls,
        lrt_tipping: rl.is_some_and(|r| r < 0.6),
        score_tipping: rs.is_some_and(|r| r < 0.25),
        lrt_score_below_5_12: ls.is_some_and(|r| r < 5.0 / 12.0),
    })
}

/// Wald, LRT and score (information at the MLE) for one coefficient, and
/// their ratios.
pub fn tipping_for(fit: &VglmFit, k: usize, beta0: f64) -> Result<RatioDiagnostics> {
    let w = wald_test(fit, k, beta0)?.statistic;
    let l = lrt(fit, k, beta0)?.statistic;
    let s = score_test(fit, k, beta0, InfoAt::Mle)?.statistic;
    tipping_ratios(w, l, s)
}

/// Approximate moments of `W/W_L` from `ℓ′, ℓ″, ℓ‴` at the null value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioMoments {
    pub expectation: f64,
    pub variance: f64,
    pub covariance: f64,
    pub correlation: f64,
    /// Chebyshev bound on `Pr(|W/W_L − 1| ≥ 2/5)`, clamped to `[0, 1]`.
    pub chebyshev_bound: f64,
}

pub fn ratio_moments(l1: f64, l2: f64, l3: f64) -> RatioMoments {
    let c = l1 * l3 / (l2 * l2);
    RatioMoments {
        expectation: 1.0 + 2.0 * c,
        variance: 4.0 * c,
        covariance: 2.0 * (1.0 - c),
        correlation: 1.0 - c,
        chebyshev_bound: (25.0 * c).clamp(0.0, 1.0),
    }
}

/// Whether `theta` lies where `(θ−θ₀)/(−2) · ℓ‴/ℓ″ < 1`.
pub fn regular_region_check(theta: f64, theta0: f64, l2: f64, l3: f64) -> bool {
    (theta - theta0) / -2.0 * (l3 / l2) < 1.0
}

fn require_m1(fit: &VglmFit) -> Result<()> {
    if fit.design.m != 1 {
        return Err(Error::Unsupported("sandwich estimators need one linear predictor".into()));
    }
    Ok(())
}

/// Meat `B = Σ xᵢxᵢᵀ (∂ℓᵢ/∂ηᵢ)²`, summed over replicates.
pub fn sandwich_meat(fit: &VglmFit) -> Result<Matrix> {
    require_m1(fit)?;
    let d = &fit.design;
    let p = d.p();
    let mut b = Matrix::zeros(p, p);
    for i in 0..d.n {
        let l = &fit.links[i][0];
        let (s, _) = d.family.score_sq(l.theta, d.y[i], d.w[i])?;
        let x = d.x.row(i);
        let c = s * l.d1 * l.d1;
        for r in 0..p {
            for t in 0..p {
                b[(r, t)] += c * x[r] * x[t];
            }
        }
    }
    Ok(b)
}

/// `Σ = A⁻¹BA⁻¹`.
pub fn sandwich_vcov(fit: &VglmFit) -> Result<Matrix> {
    let b = sandwich_meat(fit)?;
    let mut s = &(&fit.a_inv * &b) * &fit.a_inv;
    s.symmetrize();
    Ok(s)
}

pub fn sandwich_meat_deriv(fit: &VglmFit, s: usize) -> Result<Matrix> {
    require_m1(fit)?;
    let d = &fit.design;
    let p = d.p();
    let mut db = Matrix::zeros(p, p);
    for i in 0..d.n {
        let x = d.x.row(i);
        if x[s] == 0.0 {
            continue;
        }
        let l = &fit.links[i][0];
        let (sq, dsq) = d.family.score_sq(l.theta, d.y[i], d.w[i])?;
        let c = x[s] * (dsq * l.d1.powi(3) + 2.0 * sq * l.d1 * l.d2);
        for r in 0..p {
            for t in 0..p {
                db[(r, t)] += c * x[r] * x[t];
            }
        }
    }
    Ok(db)
}

/// `∂Σ/∂β̂_s = A⁻¹[∂B − ∂A A⁻¹B − BA⁻¹∂A]A⁻¹`.
pub fn sandwich_deriv(fit: &VglmFit, s: usize) -> Result<Matrix> {
    require_m1(fit)?;
    if s >= fit.p() {
        return Err(Error::ShapeMismatch(format!("coefficient {s} out of range")));
    }
    let b = sandwich_meat(fit)?;
    let db = sandwich_meat_deriv(fit, s)?;
    let da = da_dbeta_analytic(fit, s, 1)?;
    let ai = &fit.a_inv;
    let t1 = &(&da * ai) * &b;
    let t2 = &(&b * ai) * &da;
    let inner = &(&db - &t1) - &t2;
    let mut out = &(ai * &inner) * ai;
    out.symmetrize();
    Ok(out)
}

/// `(LLᵀ)⁻¹L`: row `u` gives the weights of `∂/∂β̂_s` in `∂/∂δ̂_u`.
pub fn contrast_coefficients(l: &Matrix) -> Result<Matrix> {
    let q = l.rows();
    if q == 0 || q > l.cols() {
        return Err(Error::RankDeficient(q));
    }
    qr(&l.transpose()).map_err(|_| Error::RankDeficient(q))?;
    let llt = l * &l.transpose();
    let inv = invert_spd(&llt).map_err(|_| Error::RankDeficient(q))?;
    Ok(&inv * l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastComponent {
    /// `δ̂_u = (Lβ̂ − c)_u`.
    pub delta: f64,
    /// `∂W/∂δ̂_u`.
    pub d_stat: f64,
    /// `∂W/∂δ̂_u` has the opposite sign to `δ̂_u`.
    pub hde: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastWald {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub components: Vec<ContrastComponent>,
}

impl ContrastWald {
    pub fn hde(&self) -> bool {
        self.components.iter().any(|c| c.hde)
    }
}

/// Wald test of `Lβ = c` with per-component aberration flags.
pub fn contrast_wald(fit: &VglmFit, l: &Matrix, c: &[f64]) -> Result<ContrastWald> {
    let (q, p) = (l.rows(), l.cols());
    if p != fit.p() || c.len() != q {
        return Err(Error::ShapeMismatch(format!("L is {q}x{p}, c has {}, p = {}", c.len(), fit.p())));
    }
    let coef = contrast_coefficients(l)?;
    let lb = l.mat_vec(&fit.beta)?;
    let delta: Vec<f64> = lb.iter().zip(c).map(|(a, b)| a - b).collect();
    let v = &(l * &fit.a_inv) * &l.transpose();
    let v_inv = invert_spd(&v)?;
    let vd = v_inv.mat_vec(&delta)?;
    let statistic = crate::numkit::dot(&delta, &vd).max(0.0);

    let wd = weight_derivs_analytic(fit)?;
    let mut dainv = Vec::with_capacity(p);
    for s in 0..p {
        let da = da_from_weight_derivs(fit, &wd, s, 1)?;
        dainv.push(dainv_dbeta(&fit.a, &da)?);
    }
    // g = Lᵀ V⁻¹ δ, so δᵀ ∂V⁻¹ δ = −gᵀ (∂A⁻¹) g
    let g = l.transpose().mat_vec(&vd)?;
    let mut components = Vec::with_capacity(q);
    for u in 0..q {
        let mut d_ainv = Matrix::zeros(p, p);
        for (s, m) in dainv.iter().enumerate() {
            let w = coef[(u, s)];
            if w != 0.0 {
                d_ainv.axpy(w, m);
            }
        }
        let d_stat = 2.0 * vd[u] - d_ainv.bilinear(&g, &g);
        let sign = if delta[u] > 0.0 {
            1.0
        } else if delta[u] < 0.0 {
            -1.0
        } else {
            0.0
        };
        components.push(ContrastComponent { delta: delta[u], d_stat, hde: sign * d_stat < 0.0 });
    }
    Ok(ContrastWald { statistic, df: q, p_value: chi2_sf(statistic, q as f64), components })
}

/// Derivative of `A¹¹ = (A₁₁ − A₁₂A₂₂⁻¹A₂₁)⁻¹` given `∂A`, with block 1 the
/// coefficients listed in `first`.
pub fn profile_info_deriv(a: &Matrix, da: &Matrix, first: &[usize]) -> Result<Matrix> {
    let p = a.rows();
    if a.cols() != p || da.rows() != p || da.cols() != p {
        return Err(Error::ShapeMismatch("A and dA must be square and equal in size".into()));
    }
    if first.is_empty() || first.iter().any(|&j| j >= p) {
        return Err(Error::ShapeMismatch("block 1 indices out of range".into()));
    }
    let second: Vec<usize> = (0..p).filter(|j| !first.contains(j)).collect();
    let blk = |m: &Matrix, r: &[usize], c: &[usize]| m.submatrix(r, c);
    let a11 = blk(a, first, first);
    let da11 = blk(da, first, first);
    let (inner, a_sup) = if second.is_empty() {
        (da11, invert_spd(&a11)?)
    } else {
        let a12 = blk(a, first, &second);
        let a21 = blk(a, &second, first);
        let a22i = invert_spd(&blk(a, &second, &second))?;
        let schur = &a11 - &(&(&a12 * &a22i) * &a21);
        let a_sup = invert_spd(&schur)?;
        let da12 = blk(da, first, &second);
        let da21 = blk(da, &second, first);
        let da22 = blk(da, &second, &second);
        let k = &a12 * &a22i;
        let h = &a22i * &a21;
        let mut inner = da11;
        inner.axpy(-1.0, &(&da12 * &h));
        inner.axpy(1.0, &(&(&k * &da22) * &h));
        inner.axpy(-1.0, &(&k * &da21));
        (inner, a_sup)
    };
    let mut out = (&(&a_sup * &inner) * &a_sup).scale(-1.0);
    out.symmetrize();
    Ok(out)
}
