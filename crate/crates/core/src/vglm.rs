//! Model specification, the VLM design matrix and Fisher scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{working_weight, Family};
use crate::links::LinkDerivBundle;
use crate::numkit::{invert_spd, norm2, qr, solve_spd, Matrix};

/// Working-weight diagonal floor used when assembling `A`.
pub const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    /// `n x p_LM` covariates, intercept column included if wanted.
    pub x_lm: Matrix,
    pub y: Vec<f64>,
    /// One `M x r_k` constraint matrix per LM column.
    pub constraints: Vec<Matrix>,
    /// `n x M` offsets.
    pub offsets: Option<Matrix>,
    /// Optional `n x M` covariate values that vary by linear predictor, per LM column.
    pub xij: Vec<Option<Matrix>>,
    pub prior_weights: Vec<f64>,
    pub column_names: Vec<String>,
}

pub fn constraint_trivial(m: usize) -> Matrix {
    Matrix::identity(m)
}

pub fn constraint_parallel(m: usize) -> Matrix {
    Matrix::new(m, 1, vec![1.0; m]).unwrap()
}

/// Columns of `I_M`, 1-based.
pub fn constraint_cols(m: usize, cols: &[usize]) -> Result<Matrix> {
    let mut h = Matrix::zeros(m, cols.len());
    for (r, &j) in cols.iter().enumerate() {
        if j == 0 || j > m {
            return Err(Error::ShapeMismatch(format!("constraint column {j} outside 1..={m}")));
        }
        h[(j - 1, r)] = 1.0;
    }
    Ok(h)
}

impl ModelSpec {
    pub fn new(family: Family, x_lm: Matrix, y: Vec<f64>) -> Self {
        let p = x_lm.cols();
        let n = x_lm.rows();
        let m = family.m();
        Self {
            family,
            constraints: vec![constraint_trivial(m); p],
            offsets: None,
            xij: vec![None; p],
            prior_weights: vec![1.0; n],
            column_names: (1..=p).map(|k| format!("x{k}")).collect(),
            x_lm,
            y,
        }
    }

    pub fn with_names<S: Into<String>>(mut self, names: Vec<S>) -> Self {
        self.column_names = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_constraints(mut self, constraints: Vec<Matrix>) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn with_weights(mut self, w: Vec<f64>) -> Self {
        self.prior_weights = w;
        self
    }

    pub fn with_offsets(mut self, offsets: Matrix) -> Self {
        self.offsets = Some(offsets);
        self
    }

    pub fn with_xij(mut self, k: usize, values: Matrix) -> Self {
        if k < self.xij.len() {
            self.xij[k] = Some(values);
        }
        self
    }

    pub fn n(&self) -> usize {
        self.x_lm.rows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        let p = self.x_lm.cols();
        let m = self.family.m();
        let mismatch = |s: String| Err(Error::ShapeMismatch(s));
        if self.y.len() != n {
            return mismatch(format!("response has {} values for {n} rows", self.y.len()));
        }
        if self.prior_weights.len() != n {
            return mismatch(format!("{} prior weights for {n} rows", self.prior_weights.len()));
        }
        if self.constraints.len() != p || self.xij.len() != p || self.column_names.len() != p {
            return mismatch("one constraint matrix, xij slot and name per column required".into());
        }
        for (k, h) in self.constraints.iter().enumerate() {
            if h.rows() != m || h.cols() == 0 {
                return mismatch(format!("constraint matrix {k} is {}x{}", h.rows(), h.cols()));
            }
        }
        for x in self.xij.iter().flatten() {
            if x.rows() != n || x.cols() != m {
                return mismatch("xij matrices must be n x M".into());
            }
        }
        if let Some(o) = &self.offsets {
            if o.rows() != n || o.cols() != m {
                return mismatch("offsets must be n x M".into());
            }
        }
        for &w in &self.prior_weights {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Domain(format!("prior weight {w} must be positive")));
            }
        }
        for &y in &self.y {
            self.family.check_response(y)?;
        }
        Ok(())
    }

    /// Coefficient names in VLM order.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, h) in self.column_names.iter().zip(&self.constraints) {
            if h.cols() == 1 {
                out.push(name.clone());
            } else {
                for r in 0..h.cols() {
                    // label by the linear predictor a unit column picks out
                    let col = h.column(r);
                    let unit = col.iter().filter(|v| **v != 0.0).count() == 1;
                    let idx = if unit { col.iter().position(|v| *v != 0.0).unwrap() + 1 } else { r + 1 };
                    out.push(format!("{name}:{idx}"));
                }
            }
        }
        out
    }

    pub fn design(&self) -> Result<VlmDesign> {
        self.validate()?;
        let n = self.n();
        let m = self.family.m();
        let x = build_xvlm(self)?;
        let offset = match &self.offsets {
            Some(o) => o.data().to_vec(),
            None => vec![0.0; n * m],
        };
        Ok(VlmDesign {
            family: self.family.clone(),
            n,
            m,
            x,
            offset,
            y: self.y.clone(),
            w: self.prior_weights.clone(),
            names: self.coefficient_names(),
        })
    }
}

/// Stack `X_LM` against the constraint matrices; row `i*M + j` is linear predictor `j` of observation `i`.
pub fn build_xvlm(spec: &ModelSpec) -> Result<Matrix> {
    spec.validate()?;
    let n = spec.n();
    let m = spec.family.m();
    let p: usize = spec.constraints.iter().map(|h| h.cols()).sum();
    let mut x = Matrix::zeros(n * m, p);
    let mut c0 = 0;
    for (k, h) in spec.constraints.iter().enumerate() {
        for i in 0..n {
            for j in 0..m {
                let xv = match &spec.xij[k] {
                    Some(xm) => xm[(i, j)],
                    None => spec.x_lm[(i, k)],
                };
                for r in 0..h.cols() {
                    x[(i * m + j, c0 + r)] = xv * h[(j, r)];
                }
            }
        }
        c0 += h.cols();
    }
    Ok(x)
}

/// A model reduced to its VLM form.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmDesign {
    pub family: Family,
    pub n: usize,
    pub m: usize,
    pub x: Matrix,
    pub offset: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub names: Vec<String>,
}

impl VlmDesign {
    pub fn p(&self) -> usize {
        self.x.cols()
    }

    /// Rows of `X_VLM` belonging to observation `i`.
    pub fn block(&self, i: usize) -> Matrix {
        let p = self.p();
        let start = i * self.m * p;
        Matrix::new(self.m, p, self.x.data()[start..start + self.m * p].to_vec()).unwrap()
    }

    /// Fix coefficient `k` at `value`, moving it into the offset.
    pub fn drop_coefficient(&self, k: usize, value: f64) -> Result<VlmDesign> {
        if k >= self.p() {
            return Err(Error::ShapeMismatch(format!("coefficient {k} out of range")));
        }
        let mut offset = self.offset.clone();
        for (r, o) in offset.iter_mut().enumerate() {
            *o += value * self.x[(r, k)];
        }
        let mut names = self.names.clone();
        names.remove(k);
        Ok(VlmDesign { x: self.x.remove_column(k), offset, names, ..self.clone() })
    }

    pub fn eta(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let mut eta = self.x.mat_vec(beta)?;
        for (e, o) in eta.iter_mut().zip(&self.offset) {
            *e += o;
        }
        Ok(eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-9, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    /// Log-likelihood settled while coefficients kept drifting, as under separation.
    DivergedToBoundary,
    NotConverged,
    /// Evaluated at given coefficients without iterating.
    Evaluated,
}

/// Quantities at a coefficient vector.
#[derive(Debug, Clone)]
struct State {
    eta: Vec<f64>,
    links: Vec<Vec<LinkDerivBundle>>,
    weights: Vec<Matrix>,
    /// `∂ℓ_i/∂η_i`, length nM.
    score_eta: Vec<f64>,
    loglik: f64,
}

fn evaluate(design: &VlmDesign, eta: Vec<f64>) -> Result<State> {
    let (n, m) = (design.n, design.m);
    let f = &design.family;
    let mut links = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut score_eta = Vec::with_capacity(n * m);
    let mut loglik = 0.0;
    for i in 0..n {
        let b = f.links_at(&eta[i * m..(i + 1) * m])?;
        let theta: Vec<f64> = b.iter().map(|x| x.theta).collect();
        let eim = f.eim(&theta, design.w[i])?;
        weights.push(working_weight(&b, &eim));
        let u = f.score(&theta, design.y[i], design.w[i])?;
        score_eta.extend(u.iter().zip(&b).map(|(s, l)| s * l.d1));
        loglik += f.loglik(&theta, design.y[i], design.w[i])?;
        links.push(b);
    }
    if !loglik.is_finite() {
        return Err(Error::Domain("log-likelihood is not finite".into()));
    }
    Ok(State { eta, links, weights, score_eta, loglik })
}

pub(crate) const INFEASIBLE_START: &str = "supplied starting values are infeasible; using family defaults";

pub(crate) fn floored(w: &Matrix) -> Matrix {
    let mut w = w.clone();
    for j in 0..w.rows() {
        if w[(j, j)] < WEIGHT_FLOOR {
            w[(j, j)] = WEIGHT_FLOOR;
        }
    }
    w
}

/// `Σ X_iᵀ W_i X_i`.
pub(crate) fn assemble_a(design: &VlmDesign, weights: &[Matrix]) -> Matrix {
    let p = design.p();
    let m = design.m;
    let mut a = Matrix::zeros(p, p);
    for (i, w) in weights.iter().enumerate() {
        let xi = design.block(i);
        let w = floored(w);
        // (W X_i) then X_iᵀ (W X_i)
        let wx = &w * &xi;
        for s in 0..p {
            for t in s..p {
                let mut v = 0.0;
                for j in 0..m {
                    v += xi[(j, s)] * wx[(j, t)];
                }
                a[(s, t)] += v;
            }
        }
    }
    for s in 0..p {
        for t in 0..s {
            a[(s, t)] = a[(t, s)];
        }
    }
    a
}

fn score_vector(design: &VlmDesign, score_eta: &[f64]) -> Vec<f64> {
    let p = design.p();
    let mut u = vec![0.0; p];
    for r in 0..design.x.rows() {
        let s = score_eta[r];
        if s == 0.0 {
            continue;
        }
        for (k, x) in design.x.row(r).iter().enumerate() {
            u[k] += x * s;
        }
    }
    u
}

#[derive(Debug, Clone, PartialEq)]
pub struct VglmFit {
    pub design: VlmDesign,
    pub beta: Vec<f64>,
    /// Linear predictors, length nM.
    pub eta: Vec<f64>,
    pub links: Vec<Vec<LinkDerivBundle>>,
    /// Working weights `W_i` without the floor.
    pub weights: Vec<Matrix>,
    pub a: Matrix,
    pub a_inv: Matrix,
    pub loglik: f64,
    /// Score `∂ℓ/∂β` at the final coefficients.
    pub score: Vec<f64>,
    pub iterations: usize,
    pub status: FitStatus,
    pub warnings: Vec<String>,
}

impl VglmFit {
    fn from_state(design: VlmDesign, beta: Vec<f64>, st: State, iterations: usize, status: FitStatus) -> Result<Self> {
        let a = assemble_a(&design, &st.weights);
        let a_inv = invert_spd(&a)?;
        let score = score_vector(&design, &st.score_eta);
        Ok(Self {
            design,
            beta,
            eta: st.eta,
            links: st.links,
            weights: st.weights,
            a,
            a_inv,
            loglik: st.loglik,
            score,
            iterations,
            status,
            warnings: Vec::new(),
        })
    }

    /// All fitted quantities at `beta`, without iterating.
    pub fn at_coefficients(design: &VlmDesign, beta: &[f64]) -> Result<Self> {
        if beta.len() != design.p() {
            return Err(Error::ShapeMismatch(format!("{} coefficients for {} columns", beta.len(), design.p())));
        }
        let st = evaluate(design, design.eta(beta)?)?;
        Self::from_state(design.clone(), beta.to_vec(), st, 0, FitStatus::Evaluated)
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn se(&self, s: usize) -> f64 {
        self.a_inv[(s, s)].sqrt()
    }

    pub fn theta(&self, i: usize) -> Vec<f64> {
        self.links[i].iter().map(|b| b.theta).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.design.names
    }

    pub fn converged(&self) -> bool {
        self.status == FitStatus::Converged
    }
}

fn weighted_ls_start(design: &VlmDesign, eta0: &[f64], weights: &[Matrix]) -> Result<Vec<f64>> {
    let p = design.p();
    let m = design.m;
    let a = assemble_a(design, weights);
    let mut rhs = vec![0.0; p];
    for (i, w) in weights.iter().enumerate() {
        let xi = design.block(i);
        let z: Vec<f64> = (0..m).map(|j| eta0[i * m + j] - design.offset[i * m + j]).collect();
        let wz = floored(w).mat_vec(&z)?;
        for s in 0..p {
            for j in 0..m {
                rhs[s] += xi[(j, s)] * wz[j];
            }
        }
    }
    solve_spd(&a, &rhs)
}

/// Fisher scoring with step-halving.
pub fn fit_irls(spec: &ModelSpec, init: Option<&[f64]>, opts: &IrlsOptions) -> Result<VglmFit> {
    fit_design(&spec.design()?, init, opts)
}

pub fn fit_design(design: &VlmDesign, init: Option<&[f64]>, opts: &IrlsOptions) -> Result<VglmFit> {
    let p = design.p();
    if p == 0 {
        let st = evaluate(design, design.offset.clone())?;
        return VglmFit::from_state(design.clone(), vec![], st, 0, FitStatus::Converged);
    }
    if design.x.rows() < p {
        return Err(Error::RankDeficient(design.x.rows()));
    }
    qr(&design.x)?;

    let mut warnings = Vec::new();
    let start = match init {
        Some(b) if b.len() == p => match evaluate(design, design.eta(b)?) {
            Ok(st) => Some((b.to_vec(), st)),
            Err(_) => {
                warnings.push(INFEASIBLE_START.to_string());
                None
            }
        },
        Some(b) => return Err(Error::ShapeMismatch(format!("{} starting values for {p} coefficients", b.len()))),
        None => None,
    };
    let (mut beta, mut st) = match start {
        Some(s) => s,
        None => {
            let rows = design.family.init_eta(&design.y, &design.w)?;
            let eta0: Vec<f64> = rows.concat();
            let st0 = evaluate(design, eta0.clone())?;
            let b0 = weighted_ls_start(design, &eta0, &st0.weights)?;
            let st = evaluate(design, design.eta(&b0)?)
                .map_err(|e| Error::Domain(format!("no feasible starting values: {e}")))?;
            (b0, st)
        }
    };

    let mut status = FitStatus::NotConverged;
    let mut iterations = 0;
    let mut prev_step = f64::INFINITY;
    let mut halved = false;
    for iter in 1..=opts.max_iter {
        iterations = iter;
        let a = assemble_a(design, &st.weights);
        let u = score_vector(design, &st.score_eta);
        let delta = solve_spd(&a, &u)?;
        let mut scale = 1.0;
        let mut accepted = None;
        let mut full_step_ll = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + scale * d).collect();
            if let Ok(eta) = design.eta(&cand) {
                if let Ok(s) = evaluate(design, eta) {
                    if scale == 1.0 {
                        full_step_ll = Some(s.loglik);
                    }
                    if s.loglik >= st.loglik - 1e-12 * (1.0 + st.loglik.abs()) {
                        accepted = Some((cand, s));
                        break;
                    }
                }
            }
            scale *= 0.5;
            halved = true;
        }
        let Some((cand, s_new)) = accepted else {
            // A full step that only loses rounding noise in a flat likelihood.
            let flat = full_step_ll
                .is_some_and(|ll| (ll - st.loglik).abs() <= opts.tol * (st.loglik.abs() + 0.1));
            let dn = norm2(&delta);
            if flat && dn <= opts.tol * (1.0 + norm2(&beta)) {
                status = FitStatus::Converged;
            } else if flat || (iter >= 3 && dn >= 0.5 * prev_step) {
                // still drifting when the fitted values hit the edge of the parameter space
                status = FitStatus::DivergedToBoundary;
            } else {
                warnings.push(format!("step-halving failed at iteration {iter}"));
            }
            break;
        };
        let step: Vec<f64> = cand.iter().zip(&beta).map(|(a, b)| a - b).collect();
        let step_norm = norm2(&step);
        let beta_ok = step_norm <= opts.tol * (1.0 + norm2(&cand));
        let ll_ok = (s_new.loglik - st.loglik).abs() <= opts.tol * (s_new.loglik.abs() + 0.1);
        beta = cand;
        st = s_new;
        if beta_ok && ll_ok {
            status = FitStatus::Converged;
            break;
        }
        if ll_ok && iter >= 3 && step_norm >= 0.5 * prev_step {
            status = FitStatus::DivergedToBoundary;
            break;
        }
        prev_step = step_norm;
    }
    if halved {
        warnings.push("step-halving was used".to_string());
    }
    if iterations > 12 {
        warnings.push(format!("IRLS needed {iterations} iterations"));
    }
    match status {
        FitStatus::DivergedToBoundary => warnings.push(
            "coefficients drift while the log-likelihood is flat; estimates are at the boundary".to_string(),
        ),
        FitStatus::NotConverged => warnings.push(format!("IRLS did not converge in {} iterations", opts.max_iter)),
        _ => {}
    }
    let mut fit = VglmFit::from_state(design.clone(), beta, st, iterations, status)?;
    fit.warnings = warnings;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::links::LinkKind;

    fn hd_spec(n: f64, r0: f64, r: f64) -> ModelSpec {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        ModelSpec::new(Family::binomial(LinkKind::Logit), x, vec![0.0, 1.0, 0.0, 1.0])
            .with_weights(vec![n - r0, r0, n - r, r])
            .with_names(vec!["(Intercept)", "x2"])
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn two_by_two_closed_form() {
        let fit = fit_irls(&hd_spec(100.0, 25.0, 70.0), None, &IrlsOptions::default()).unwrap();
        assert_eq!(fit.status, FitStatus::Converged);
        let b1 = logit(0.25);
        let b2 = logit(0.7) - b1;
        assert!((fit.beta[0] - b1).abs() < 1e-10);
        assert!((fit.beta[1] - b2).abs() < 1e-10);
        let se2 = (1.0f64 / (100.0 * 0.25 * 0.75) + 1.0 / (100.0 * 0.7 * 0.3)).sqrt();
        assert!((fit.se(1) - se2).abs() < 1e-10);
        assert!(fit.score.iter().all(|u| u.abs() < 1e-8));
    }

    #[test]
    fn refit_from_mle_takes_one_iteration() {
        let spec = hd_spec(100.0, 25.0, 60.0);
        let fit = fit_irls(&spec, None, &IrlsOptions::default()).unwrap();
        let again = fit_irls(&spec, Some(&fit.beta), &IrlsOptions::default()).unwrap();
        assert_eq!(again.iterations, 1);
        assert_eq!(again.status, FitStatus::Converged);
    }

    #[test]
    fn intercept_only_poisson() {
        let x = Matrix::new(5, 1, vec![1.0; 5]).unwrap();
        let spec = ModelSpec::new(Family::poisson(LinkKind::Log), x, vec![0.0, 1.0, 3.0, 2.0, 4.0]);
        let fit = fit_irls(&spec, None, &IrlsOptions::default()).unwrap();
        assert!(fit.iterations <= 25);
        assert!((fit.beta[0] - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn xvlm_shape_and_parallelism() {
        let x = Matrix::from_rows(&[vec![1.0, 0.5], vec![1.0, -1.0]]).unwrap();
        let f = Family::cumulative(4, LinkKind::Logit, false).unwrap();
        let spec = ModelSpec::new(f, x, vec![1.0, 3.0])
            .with_constraints(vec![constraint_trivial(3), constraint_parallel(3)]);
        let xv = build_xvlm(&spec).unwrap();
        assert_eq!((xv.rows(), xv.cols()), (6, 4));
        for j in 0..3 {
            assert_eq!(xv[(j, 3)], 0.5);
            assert_eq!(xv[(3 + j, 3)], -1.0);
            assert_eq!(xv[(j, j)], 1.0);
        }
        assert_eq!(spec.coefficient_names(), vec!["x1:1", "x1:2", "x1:3", "x2"]);
    }

    #[test]
    fn xij_replaces_covariate_per_predictor() {
        let x = Matrix::from_rows(&[vec![1.0, 9.0], vec![1.0, 9.0]]).unwrap();
        let xij = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let spec = ModelSpec::new(Family::normal(LinkKind::Identity, LinkKind::Log), x, vec![0.0, 1.0])
            .with_constraints(vec![constraint_trivial(2), constraint_parallel(2)])
            .with_xij(1, xij);
        let xv = build_xvlm(&spec).unwrap();
        assert_eq!(xv.column(2), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rank_deficient_design() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let spec = ModelSpec::new(Family::poisson(LinkKind::Log), x, vec![1.0, 2.0, 3.0]);
        assert!(matches!(fit_irls(&spec, None, &IrlsOptions::default()), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn separated_logistic_diverges_to_boundary() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| if i < 5 { 0.0 } else { 1.0 }).collect();
        let spec = ModelSpec::new(Family::binomial(LinkKind::Logit), Matrix::from_rows(&xs).unwrap(), y);
        let fit = fit_irls(&spec, None, &IrlsOptions::default()).unwrap();
        assert_eq!(fit.status, FitStatus::DivergedToBoundary, "{:?} {:?} {}", fit.beta, fit.warnings, fit.iterations);
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn drop_coefficient_moves_column_to_offset() {
        let d = hd_spec(100.0, 25.0, 60.0).design().unwrap();
        let r = d.drop_coefficient(1, 0.7).unwrap();
        assert_eq!(r.p(), 1);
        assert_eq!(r.offset, vec![0.0, 0.0, 0.7, 0.7]);
        assert_eq!(r.names, vec!["(Intercept)"]);
    }
}
