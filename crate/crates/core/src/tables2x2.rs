//! Closed forms for 2x2 tables and two-group Poisson designs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{Family, FamilyKind};
use crate::links::LinkKind;
use crate::numkit::{invert_spd, Matrix};
use crate::vglm::{ModelSpec, VglmFit};

/// Counts of a 2x2 table. The `x₂ = 1` row is scaled by `c_star`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoByTwo {
    pub n0: f64,
    pub n1: f64,
    pub r0: f64,
    pub r1: f64,
    pub c_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormResult {
    pub beta1: f64,
    pub beta2: f64,
    pub se_beta2: f64,
    pub wald2: f64,
    pub d_wald2: f64,
    pub hde_flag: bool,
    pub gamma: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl TwoByTwo {
    pub fn new(n0: f64, n1: f64, r0: f64, r1: f64) -> Result<Self> {
        let t = Self { n0, n1, r0, r1, c_star: 1.0 };
        t.check()?;
        Ok(t)
    }

    /// Equal group sizes `N`, as in the classic illustration.
    pub fn hd(n: f64, r0: f64, r: f64) -> Result<Self> {
        Self::new(n, n, r0, r)
    }

    pub fn with_c_star(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!("sampling multiplier {c} must be positive")));
        }
        self.c_star = c;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0 < self.n0 && self.r1 > 0.0 && self.r1 < self.n1) {
            return Err(Error::BoundaryCell);
        }
        Ok(())
    }

    pub fn pi0(&self) -> f64 {
        self.r0 / self.n0
    }

    pub fn pi1(&self) -> f64 {
        self.r1 / self.n1
    }

    /// `N₁* = c* N₁`.
    pub fn n1_star(&self) -> f64 {
        self.c_star * self.n1
    }

    /// `f₀ = N₀ / N₁*`.
    pub fn f0(&self) -> f64 {
        self.n0 / self.n1_star()
    }

    /// Four weighted Bernoulli rows with an intercept and the group indicator.
    pub fn model_spec(&self) -> ModelSpec {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let c = self.c_star;
        ModelSpec::new(Family::binomial(LinkKind::Logit), x, vec![0.0, 1.0, 0.0, 1.0])
            .with_weights(vec![self.n0 - self.r0, self.r0, c * (self.n1 - self.r1), c * self.r1])
            .with_names(vec!["(Intercept)", "x2"])
    }

    /// Likelihood-ratio statistic for `β₂ = 0`.
    pub fn lrt(&self) -> f64 {
        let c = self.c_star;
        let cells = [(self.n0, self.r0), (c * self.n1, c * self.r1)];
        let ll = |n: f64, r: f64, p: f64| r * p.ln() + (n - r) * (1.0 - p).ln();
        let full: f64 = cells.iter().map(|&(n, r)| ll(n, r, r / n)).sum();
        let pooled = (cells[0].1 + cells[1].1) / (cells[0].0 + cells[1].0);
        let null: f64 = cells.iter().map(|&(n, r)| ll(n, r, pooled)).sum();
        2.0 * (full - null)
    }
}

/// Exact MLEs, SE and Wald slope for `β₂`.
pub fn closed_form(t: &TwoByTwo) -> Result<ClosedFormResult> {
    t.check()?;
    let (p0, p1) = (t.pi0(), t.pi1());
    let (v0, v1) = (p0 * (1.0 - p0), p1 * (1.0 - p1));
    let n1s = t.n1_star();
    let beta1 = logit(p0);
    let beta2 = logit(p1) - beta1;
    let a = 1.0 / (t.n0 * v0) + 1.0 / (n1s * v1);
    let se = a.sqrt();
    let d_wald2 = (1.0 - beta2 * (2.0 * p1 - 1.0) / (2.0 * n1s * v1 * a)) / se;
    let d = dispro_analysis(t)?;
    Ok(ClosedFormResult { beta1, beta2, se_beta2: se, wald2: beta2 / se, d_wald2, hde_flag: d.hde_flag, gamma: d.gamma })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisproResult {
    pub gamma: f64,
    /// `β̂₂(π̂₁ − ½) f₀v₀ / (f₀v₀ + v₁)`; the effect is present when it exceeds 1.
    pub rhs: f64,
    pub hde_flag: bool,
}

/// Sampling-effect measure `γ` and the disproportional-sampling condition.
pub fn dispro_analysis(t: &TwoByTwo) -> Result<DisproResult> {
    t.check()?;
    let (p0, p1) = (t.pi0(), t.pi1());
    let (v0, v1) = (p0 * (1.0 - p0), p1 * (1.0 - p1));
    let f0 = t.f0();
    let beta2 = logit(p1) - logit(p0);
    let rhs = beta2 * (p1 - 0.5) * f0 * v0 / (f0 * v0 + v1);
    Ok(DisproResult { gamma: f0 * v0 / v1, rhs, hde_flag: rhs > 1.0 })
}

/// Last `R` without and first `R` with the effect for `N₀ = N₁ = n`, scanning upwards from `r0`.
pub fn hde_onset(n: u32, r0: u32) -> Result<(Option<u32>, Option<u32>)> {
    let mut last_false = None;
    for r in r0..n {
        let t = TwoByTwo::hd(f64::from(n), f64::from(r0), f64::from(r))?;
        if closed_form(&t)?.hde_flag {
            return Ok((last_false, Some(r)));
        }
        last_false = Some(r);
    }
    Ok((last_false, None))
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return Err(Error::NoBracket);
    }
    let rising = flo < 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if (f(mid) < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Root `π̂₁` of `logit π = 2/(2π − 1)` on the upper or lower branch.
pub fn known_intercept_root(upper: bool) -> f64 {
    let f = |p: f64| logit(p) - 2.0 / (2.0 * p - 1.0);
    let r = if upper { bisect(f, 0.5 + 1e-9, 1.0 - 1e-12, 1e-12) } else { bisect(f, 1e-12, 0.5 - 1e-9, 1e-12) };
    r.expect("the threshold equation changes sign on both branches")
}

/// Smallest `β₂` (and odds ratio) that allows the effect when `π₀ = ½` is known.
pub fn known_intercept_threshold() -> (f64, f64) {
    let b = logit(known_intercept_root(true));
    (b, b.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryCovariateCondition {
    pub a11: f64,
    pub b: f64,
    pub lhs: f64,
    pub hde_flag: bool,
}

/// The partitioned-information condition for a 0/1 covariate in a logistic regression.
pub fn binary_covariate_condition(fit: &VglmFit, k: usize, beta0: f64) -> Result<BinaryCovariateCondition> {
    let d = &fit.design;
    if d.family.kind != FamilyKind::Binomial || d.family.links[0] != LinkKind::Logit {
        return Err(Error::Unsupported("binary covariate condition needs a logistic regression".into()));
    }
    let p = d.p();
    if k >= p || p < 2 {
        return Err(Error::ShapeMismatch(format!("coefficient {k} of {p}")));
    }
    let rest: Vec<usize> = (0..p).filter(|&j| j != k).collect();
    let q = rest.len();
    let (mut a11, mut da11) = (0.0, 0.0);
    let mut c = vec![0.0; q];
    let mut dc = vec![0.0; q];
    let mut a22 = Matrix::zeros(q, q);
    let mut da22 = Matrix::zeros(q, q);
    for i in 0..d.n {
        let xk = d.x[(i, k)];
        if xk != 0.0 && xk != 1.0 {
            return Err(Error::ShapeMismatch(format!("column {k} is not binary")));
        }
        let mu = fit.links[i][0].theta;
        let v = fit.weights[i][(0, 0)];
        let dv = (1.0 - 2.0 * mu) * v;
        let xr: Vec<f64> = rest.iter().map(|&j| d.x[(i, j)]).collect();
        for a in 0..q {
            for b in 0..q {
                a22[(a, b)] += v * xr[a] * xr[b];
                if xk == 1.0 {
                    da22[(a, b)] += dv * xr[a] * xr[b];
                }
            }
        }
        if xk == 1.0 {
            a11 += v;
            da11 += dv;
            for a in 0..q {
                c[a] += v * xr[a];
                dc[a] += dv * xr[a];
            }
        }
    }
    let a22i = invert_spd(&a22)?;
    let g = a22i.mat_vec(&c)?;
    let schur = a11 - crate::numkit::dot(&c, &g);
    let b = da11 - (2.0 * crate::numkit::dot(&dc, &g) - da22.bilinear(&g, &g));
    let a_sup = 1.0 / schur;
    let lhs = 0.5 * (fit.beta[k] - beta0) * a_sup * b;
    Ok(BinaryCovariateCondition { a11: a_sup, b, lhs, hde_flag: lhs < -1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonTwoGroup {
    pub beta2: f64,
    pub se_beta2: f64,
    pub wald2: f64,
    pub d_wald2: f64,
    pub hde_flag: bool,
    pub lrt: f64,
}

/// `N` observations at mean `mu0` (`x = 0`) and `N` at `mu1` (`x = 1`), log link.
pub fn poisson_two_group(mu0: f64, mu1: f64, n: f64) -> Result<PoissonTwoGroup> {
    if !(mu0 > 0.0 && mu1 > 0.0 && n > 0.0) {
        return Err(Error::Domain("means and group size must be positive".into()));
    }
    let beta2 = (mu1 / mu0).ln();
    let a = (mu0 + mu1) / (n * mu0 * mu1);
    let frac = mu0 / (mu0 + mu1);
    let d_wald2 = (1.0 + 0.5 * beta2 * frac) / a.sqrt();
    let mbar = 0.5 * (mu0 + mu1);
    let lrt = 2.0 * n * (mu0 * (mu0 / mbar).ln() + mu1 * (mu1 / mbar).ln());
    Ok(PoissonTwoGroup { beta2, se_beta2: a.sqrt(), wald2: beta2 / a.sqrt(), d_wald2, hde_flag: d_wald2 < 0.0, lrt })
}

/// Model specification for the two-group Poisson design.
pub fn poisson_two_group_spec(mu0: f64, mu1: f64, n: f64) -> ModelSpec {
    let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
    ModelSpec::new(Family::poisson(LinkKind::Log), x, vec![mu0, mu1])
        .with_weights(vec![n, n])
        .with_names(vec!["(Intercept)", "x2"])
}

/// `∂²W_L/∂R²` for equal group sizes, treating `R` as continuous.
pub fn lrt_second_derivative(n: f64, r0: f64, r: f64) -> f64 {
    2.0 * (1.0 / r - 1.0 / (r + r0)) + 2.0 * (1.0 / (n - r) - 1.0 / ((n - r) + n - r0))
}

/// Whether the likelihood-ratio statistic is convex in `R` on `1..N-1`.
pub fn lrt_convexity(n: u32, r0: u32) -> bool {
    (1..n).all(|r| lrt_second_derivative(f64::from(n), f64::from(r0), f64::from(r)) > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hde::detect;
    use crate::vglm::{fit_irls, IrlsOptions};

    #[test]
    fn closed_form_example() {
        let c = closed_form(&TwoByTwo::hd(100.0, 25.0, 50.0).unwrap()).unwrap();
        assert!((c.beta2 - 3f64.ln()).abs() < 1e-14);
        assert!((c.se_beta2 - 0.3055).abs() < 5e-5);
        assert!(c.d_wald2 > 0.0 && !c.hde_flag);
    }

    #[test]
    fn onset_at_92() {
        assert_eq!(hde_onset(100, 25).unwrap(), (Some(91), Some(92)));
        assert!(!closed_form(&TwoByTwo::hd(100.0, 25.0, 91.0).unwrap()).unwrap().hde_flag);
        assert!(closed_form(&TwoByTwo::hd(100.0, 25.0, 92.0).unwrap()).unwrap().hde_flag);
    }

    #[test]
    fn equal_proportions_give_no_effect() {
        let c = closed_form(&TwoByTwo::hd(100.0, 25.0, 25.0).unwrap()).unwrap();
        assert_eq!(c.beta2, 0.0);
        assert!(!c.hde_flag);
    }

    #[test]
    fn boundary_cells_rejected() {
        assert_eq!(TwoByTwo::hd(100.0, 25.0, 100.0), Err(Error::BoundaryCell));
        assert_eq!(TwoByTwo::hd(100.0, 0.0, 50.0), Err(Error::BoundaryCell));
    }

    #[test]
    fn flag_matches_slope_sign_for_unit_multiplier() {
        for r in 1..100 {
            let c = closed_form(&TwoByTwo::hd(100.0, 25.0, f64::from(r)).unwrap()).unwrap();
            assert_eq!(c.hde_flag, c.d_wald2 < 0.0, "R = {r}");
        }
    }

    #[test]
    fn large_multiplier_removes_effect() {
        let t = TwoByTwo::hd(100.0, 25.0, 97.0).unwrap();
        let base = dispro_analysis(&t).unwrap();
        assert!(base.hde_flag);
        let mut prev = base.rhs;
        for c in [10.0, 100.0, 1e4, 1e6] {
            let d = dispro_analysis(&t.with_c_star(c).unwrap()).unwrap();
            assert!(d.rhs < prev);
            prev = d.rhs;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn need_beta2_above_two_when_pi1_near_one() {
        // π̂₁ ≈ 1 with β̂₂ ≤ 2: π̂₀ = expit(logit π̂₁ − 2)
        for &p1 in &[0.99, 0.999, 0.9999] {
            let n = 1e6;
            let p0 = 1.0 / (1.0 + (-(logit(p1) - 2.0)).exp());
            let t = TwoByTwo { n0: n, n1: n, r0: p0 * n, r1: p1 * n, c_star: 0.001 };
            let d = dispro_analysis(&t).unwrap();
            assert!(!d.hde_flag && d.rhs < 1.0);
        }
    }

    #[test]
    fn threshold_values() {
        let (b, or) = known_intercept_threshold();
        assert!((2.39..=2.41).contains(&b), "{b}");
        assert!((10.9..=11.2).contains(&or), "{or}");
        let lo = known_intercept_root(false);
        assert!((logit(lo) + b).abs() < 1e-9);
        assert!((logit(lo).exp() - 0.091).abs() < 0.001);
        assert!((2f64.exp() - 7.4).abs() / 7.4 < 0.02);
    }

    fn one_param_fit(p1: f64) -> VglmFit {
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let spec = ModelSpec::new(Family::binomial(LinkKind::Logit), x, vec![0.0, 1.0])
            .with_weights(vec![1000.0 * (1.0 - p1), 1000.0 * p1]);
        fit_irls(&spec, None, &IrlsOptions::default()).unwrap()
    }

    #[test]
    fn threshold_is_a_fixed_point_of_detect() {
        let root = known_intercept_root(true);
        assert!(!detect(&one_param_fit(root - 1e-6), 0, 0.0).unwrap());
        assert!(detect(&one_param_fit(root + 1e-6), 0, 0.0).unwrap());
    }

    #[test]
    fn convexity() {
        assert!(lrt_convexity(100, 25));
        for n in [5u32, 20, 100] {
            for r0 in 1..n {
                assert!(lrt_convexity(n, r0));
            }
        }
        // discrete second differences of the computed statistic
        let w = |r: f64| TwoByTwo::hd(100.0, 25.0, r).unwrap().lrt();
        for r in 2..98 {
            let r = f64::from(r);
            let d2 = w(r + 1.0) - 2.0 * w(r) + w(r - 1.0);
            assert!(d2 > 0.0);
        }
    }

    #[test]
    fn poisson_two_group_basics() {
        let g = poisson_two_group(7.0, 7.0, 3.0).unwrap();
        assert_eq!(g.beta2, 0.0);
        assert!((g.d_wald2 - (3.0f64 * 7.0 / 2.0).sqrt()).abs() < 1e-12);
        assert!(poisson_two_group(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn poisson_two_group_matches_generic_detect() {
        for mu1 in 1..=20 {
            let mu1 = f64::from(mu1);
            let g = poisson_two_group(20.0, mu1, 1.0).unwrap();
            let fit = fit_irls(&poisson_two_group_spec(20.0, mu1, 1.0), None, &IrlsOptions::default()).unwrap();
            assert_eq!(g.hde_flag, detect(&fit, 1, 0.0).unwrap(), "mu1 = {mu1}");
            let (d, _) = crate::hde::wald_derivs(&fit, 1, 0.0).unwrap();
            assert!((d - g.d_wald2).abs() < 1e-9 * d.abs().max(1.0));
        }
    }

    #[test]
    fn binary_condition_special_case_of_hd_data() {
        for r in 2..99 {
            let t = TwoByTwo::hd(100.0, 25.0, f64::from(r)).unwrap();
            let fit = fit_irls(&t.model_spec(), None, &IrlsOptions::default()).unwrap();
            let c = binary_covariate_condition(&fit, 1, 0.0).unwrap();
            assert_eq!(c.hde_flag, closed_form(&t).unwrap().hde_flag, "R = {r}");
            assert!((c.a11 - fit.a_inv[(1, 1)]).abs() < 1e-10 * c.a11);
        }
    }
}
