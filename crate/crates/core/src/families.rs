//! Families: expected information in θ-space, scores, log-likelihoods and
//! working weights.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::links::{eval_link, in_range, link_fun, LinkDerivBundle, LinkKind};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Binomial,
    Poisson,
    /// Parameters `(μ, σ)`.
    Normal,
    /// `levels` ordered categories; `θ_j = P(Y ≤ j)`, or `P(Y ≥ j+1)` when reversed.
    Cumulative { levels: usize, reversed: bool },
    /// Zero-inflated Poisson with parameters `(φ, λ)`.
    Zip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    pub links: Vec<LinkKind>,
}

/// Expected information at θ with its elementwise derivatives.
/// `deim[j] = ∂EIM/∂θ_j`, `d2eim[j] = ∂²EIM/∂θ_j²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EimBundle {
    pub eim: Matrix,
    pub deim: Vec<Matrix>,
    pub d2eim: Vec<Matrix>,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            FamilyKind::Binomial => "binomial".to_string(),
            FamilyKind::Poisson => "poisson".to_string(),
            FamilyKind::Normal => "normal".to_string(),
            FamilyKind::Cumulative { levels, reversed } => {
                format!("cumulative(levels={levels}{})", if reversed { ", reversed" } else { "" })
            }
            FamilyKind::Zip => "zipoisson".to_string(),
        };
        let links: Vec<&str> = self.links.iter().map(|l| l.name()).collect();
        write!(f, "{name} [{}]", links.join(", "))
    }
}

fn lfact(y: f64) -> f64 {
    ln_gamma(y + 1.0)
}

fn is_count(y: f64) -> bool {
    y >= 0.0 && y.fract() == 0.0 && y.is_finite()
}

impl Family {
    pub fn new(kind: FamilyKind, links: Vec<LinkKind>) -> Result<Self> {
        let f = Self { kind, links };
        if f.links.len() != f.m() {
            return Err(Error::ShapeMismatch(format!(
                "{} needs {} link(s), got {}",
                f,
                f.m(),
                f.links.len()
            )));
        }
        if let FamilyKind::Cumulative { levels, .. } = kind {
            if levels < 2 {
                return Err(Error::Domain("cumulative family needs at least 2 levels".into()));
            }
        }
        Ok(f)
    }

    pub fn binomial(link: LinkKind) -> Self {
        Self { kind: FamilyKind::Binomial, links: vec![link] }
    }

    pub fn poisson(link: LinkKind) -> Self {
        Self { kind: FamilyKind::Poisson, links: vec![link] }
    }

    pub fn normal(mu_link: LinkKind, sigma_link: LinkKind) -> Self {
        Self { kind: FamilyKind::Normal, links: vec![mu_link, sigma_link] }
    }

    pub fn cumulative(levels: usize, link: LinkKind, reversed: bool) -> Result<Self> {
        Self::new(FamilyKind::Cumulative { levels, reversed }, vec![link; levels.saturating_sub(1)])
    }

    pub fn zip(phi_link: LinkKind, lambda_link: LinkKind) -> Self {
        Self { kind: FamilyKind::Zip, links: vec![phi_link, lambda_link] }
    }

    /// Default links for a family kind.
    pub fn with_default_links(kind: FamilyKind) -> Result<Self> {
        match kind {
            FamilyKind::Binomial => Ok(Self::binomial(LinkKind::Logit)),
            FamilyKind::Poisson => Ok(Self::poisson(LinkKind::Log)),
            FamilyKind::Normal => Ok(Self::normal(LinkKind::Identity, LinkKind::Log)),
            FamilyKind::Cumulative { levels, reversed } => {
                Self::cumulative(levels, LinkKind::Logit, reversed)
            }
            FamilyKind::Zip => Ok(Self::zip(LinkKind::Logit, LinkKind::Log)),
        }
    }

    /// Number of linear predictors.
    pub fn m(&self) -> usize {
        match self.kind {
            FamilyKind::Binomial | FamilyKind::Poisson => 1,
            FamilyKind::Normal | FamilyKind::Zip => 2,
            FamilyKind::Cumulative { levels, .. } => levels.saturating_sub(1),
        }
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.m() {
            return Err(Error::ShapeMismatch(format!("theta has length {}", theta.len())));
        }
        let bad = |what: &str, v: f64| Err(Error::Domain(format!("{what} = {v} is outside the parameter space")));
        match self.kind {
            FamilyKind::Binomial => {
                if !(theta[0] > 0.0 && theta[0] < 1.0) {
                    return bad("mu", theta[0]);
                }
            }
            FamilyKind::Poisson => {
                if !(theta[0] > 0.0 && theta[0].is_finite()) {
                    return bad("lambda", theta[0]);
                }
            }
            FamilyKind::Normal => {
                if !theta[0].is_finite() {
                    return bad("mu", theta[0]);
                }
                if !(theta[1] > 0.0 && theta[1].is_finite()) {
                    return bad("sigma", theta[1]);
                }
            }
            FamilyKind::Cumulative { reversed, .. } => {
                for &t in theta {
                    if !(t > 0.0 && t < 1.0) {
                        return bad("cumulative probability", t);
                    }
                }
                for w in theta.windows(2) {
                    let ok = if reversed { w[0] > w[1] } else { w[0] < w[1] };
                    if !ok {
                        return Err(Error::OrderViolation);
                    }
                }
            }
            FamilyKind::Zip => {
                if !(theta[0] >= 0.0 && theta[0] < 1.0) {
                    return bad("phi", theta[0]);
                }
                if !(theta[1] > 0.0 && theta[1].is_finite()) {
                    return bad("lambda", theta[1]);
                }
            }
        }
        Ok(())
    }

    pub fn check_response(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Binomial => (0.0..=1.0).contains(&y),
            FamilyKind::Poisson | FamilyKind::Zip => is_count(y),
            FamilyKind::Normal => y.is_finite(),
            FamilyKind::Cumulative { levels, .. } => is_count(y) && y >= 1.0 && y <= levels as f64,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("response {y} is invalid for {self}")))
        }
    }

    /// Inverse links at `eta`, with the resulting θ checked against the parameter space.
    pub fn links_at(&self, eta: &[f64]) -> Result<Vec<LinkDerivBundle>> {
        if eta.len() != self.m() {
            return Err(Error::ShapeMismatch(format!("eta has length {}", eta.len())));
        }
        let b: Vec<LinkDerivBundle> =
            self.links.iter().zip(eta).map(|(l, e)| eval_link(*l, *e)).collect::<Result<_>>()?;
        for (l, bb) in self.links.iter().zip(&b) {
            if !in_range(*l, bb.theta) {
                return Err(Error::Domain(format!("{l} inverse saturated at theta = {}", bb.theta)));
            }
        }
        let theta: Vec<f64> = b.iter().map(|x| x.theta).collect();
        self.check_theta(&theta)?;
        Ok(b)
    }

    pub fn eta_from_theta(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.links.iter().zip(theta).map(|(l, t)| link_fun(*l, *t)).collect()
    }

    /// Category probabilities and the vectors `v_s = ∂μ_s/∂θ`.
    fn cumulative_parts(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let reversed = matches!(self.kind, FamilyKind::Cumulative { reversed: true, .. });
        let m = theta.len();
        let k = m + 1;
        let mut mu = Vec::with_capacity(k);
        let mut vs = Vec::with_capacity(k);
        for s in 0..k {
            let mut v = vec![0.0; m];
            let sign = if reversed { -1.0 } else { 1.0 };
            if s < m {
                v[s] += sign;
            }
            if s > 0 {
                v[s - 1] -= sign;
            }
            let upper = if s < m { theta[s] } else if reversed { 0.0 } else { 1.0 };
            let lower = if s > 0 { theta[s - 1] } else if reversed { 1.0 } else { 0.0 };
            mu.push(sign * (upper - lower));
            vs.push(v);
        }
        (mu, vs)
    }

    fn zip_eim(phi: f64, lambda: f64, w: f64) -> Matrix {
        let e = (-lambda).exp();
        let p = phi + (1.0 - phi) * e;
        let iff = -(-lambda).exp_m1() / ((1.0 - phi) * p);
        let ifl = -e / p;
        let ill = (1.0 - phi) * (1.0 / lambda - phi * e / p);
        Matrix::from_rows(&[vec![iff, ifl], vec![ifl, ill]]).unwrap().scale(w)
    }

    fn zip_deim(phi: f64, lambda: f64, w: f64) -> [Matrix; 2] {
        let e = (-lambda).exp();
        let om = -(-lambda).exp_m1();
        let p = phi + (1.0 - phi) * e;
        let p2 = p * p;
        let dphi_ff = om * (2.0 * p - 1.0) / ((1.0 - phi).powi(2) * p2);
        let dphi_fl = e * om / p2;
        let dphi_ll = -1.0 / lambda + phi * e / p - (1.0 - phi) * e * e / p2;
        let dl_ff = e / ((1.0 - phi) * p2);
        let dl_fl = e * phi / p2;
        let dl_ll = (1.0 - phi) * (-1.0 / (lambda * lambda) + phi * phi * e / p2);
        let mk = |a: f64, b: f64, c: f64| Matrix::from_rows(&[vec![a, b], vec![b, c]]).unwrap().scale(w);
        [mk(dphi_ff, dphi_fl, dphi_ll), mk(dl_ff, dl_fl, dl_ll)]
    }

    fn eim_impl(&self, theta: &[f64], w: f64, order: usize) -> Result<EimBundle> {
        self.check_theta(theta)?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Domain(format!("prior weight {w} must be positive")));
        }
        let m = self.m();
        let scalar = |e: f64, d: f64, d2: f64| EimBundle {
            eim: Matrix::from_diag(&[e]),
            deim: vec![Matrix::from_diag(&[d])],
            d2eim: vec![Matrix::from_diag(&[d2])],
        };
        let out = match self.kind {
            FamilyKind::Binomial => {
                let mu = theta[0];
                let q = 1.0 - mu;
                scalar(
                    w / (mu * q),
                    w * (-1.0 / (mu * mu) + 1.0 / (q * q)),
                    w * (2.0 / mu.powi(3) + 2.0 / q.powi(3)),
                )
            }
            FamilyKind::Poisson => {
                let l = theta[0];
                scalar(w / l, -w / (l * l), 2.0 * w / l.powi(3))
            }
            FamilyKind::Normal => {
                let s = theta[1];
                EimBundle {
                    eim: Matrix::from_diag(&[w / (s * s), 2.0 * w / (s * s)]),
                    deim: vec![Matrix::zeros(2, 2), Matrix::from_diag(&[-2.0 * w / s.powi(3), -4.0 * w / s.powi(3)])],
                    d2eim: vec![Matrix::zeros(2, 2), Matrix::from_diag(&[6.0 * w / s.powi(4), 12.0 * w / s.powi(4)])],
                }
            }
            FamilyKind::Cumulative { .. } => {
                let (mu, vs) = self.cumulative_parts(theta);
                let mut eim = Matrix::zeros(m, m);
                let mut deim = vec![Matrix::zeros(m, m); m];
                let mut d2eim = vec![Matrix::zeros(m, m); m];
                for (ms, v) in mu.iter().zip(&vs) {
                    let nz: Vec<usize> = (0..m).filter(|&j| v[j] != 0.0).collect();
                    for &a in &nz {
                        for &b in &nz {
                            let vv = v[a] * v[b];
                            eim[(a, b)] += w * vv / ms;
                            for &j in &nz {
                                deim[j][(a, b)] -= w * v[j] * vv / (ms * ms);
                                d2eim[j][(a, b)] += 2.0 * w * v[j] * v[j] * vv / ms.powi(3);
                            }
                        }
                    }
                }
                EimBundle { eim, deim, d2eim }
            }
            FamilyKind::Zip => {
                let (phi, lambda) = (theta[0], theta[1]);
                let eim = Self::zip_eim(phi, lambda, w);
                let deim = Self::zip_deim(phi, lambda, w).to_vec();
                let d2eim = if order >= 2 { Self::zip_d2eim(phi, lambda, w) } else { vec![Matrix::zeros(2, 2); 2] };
                EimBundle { eim, deim, d2eim }
            }
        };
        Ok(out)
    }

    /// Second derivatives for the zero-inflated Poisson by central differences
    /// of the analytic first derivatives.
    fn zip_d2eim(phi: f64, lambda: f64, w: f64) -> Vec<Matrix> {
        let hp = 1e-5 * phi.max(1e-3).min(1.0 - phi);
        let hl = 1e-5 * lambda;
        let dphi = if phi - hp >= 0.0 {
            let (p, mm) = (Self::zip_deim(phi + hp, lambda, w), Self::zip_deim(phi - hp, lambda, w));
            (&p[0] - &mm[0]).scale(0.5 / hp)
        } else {
            let (f0, f1, f2) = (
                Self::zip_deim(phi, lambda, w),
                Self::zip_deim(phi + hp, lambda, w),
                Self::zip_deim(phi + 2.0 * hp, lambda, w),
            );
            let mut d = f0[0].scale(-3.0);
            d.axpy(4.0, &f1[0]);
            d.axpy(-1.0, &f2[0]);
            d.scale(0.5 / hp)
        };
        let (p, mm) = (Self::zip_deim(phi, lambda + hl, w), Self::zip_deim(phi, lambda - hl, w));
        let dl = (&p[1] - &mm[1]).scale(0.5 / hl);
        vec![dphi, dl]
    }

    /// EIM with first and second θ-derivatives, scaled by the prior weight.
    pub fn eim_bundle(&self, theta: &[f64], weight: f64) -> Result<EimBundle> {
        self.eim_impl(theta, weight, 2)
    }

    pub fn eim(&self, theta: &[f64], weight: f64) -> Result<Matrix> {
        Ok(self.eim_impl(theta, weight, 0)?.eim)
    }

    /// Log-likelihood contribution including normalizing constants.
    pub fn loglik(&self, theta: &[f64], y: f64, w: f64) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_response(y)?;
        let ll = match self.kind {
            FamilyKind::Binomial => {
                let mu = theta[0];
                let s = w * y;
                let f = w * (1.0 - y);
                let mut ll = lfact(w) - lfact(s) - lfact(f);
                if s > 0.0 {
                    ll += s * mu.ln();
                }
                if f > 0.0 {
                    ll += f * (-mu).ln_1p();
                }
                ll
            }
            FamilyKind::Poisson => {
                let l = theta[0];
                w * (y * l.ln() - l - lfact(y))
            }
            FamilyKind::Normal => {
                let (mu, s) = (theta[0], theta[1]);
                let r = (y - mu) / s;
                w * (-s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * r * r)
            }
            FamilyKind::Cumulative { .. } => {
                let (mu, _) = self.cumulative_parts(theta);
                w * mu[y as usize - 1].ln()
            }
            FamilyKind::Zip => {
                let (phi, l) = (theta[0], theta[1]);
                if y == 0.0 {
                    w * (phi + (1.0 - phi) * (-l).exp()).ln()
                } else {
                    w * ((-phi).ln_1p() - l + y * l.ln() - lfact(y))
                }
            }
        };
        Ok(ll)
    }

    /// `∂ℓ/∂θ` for one observation.
    pub fn score(&self, theta: &[f64], y: f64, w: f64) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_response(y)?;
        let u = match self.kind {
            FamilyKind::Binomial => {
                let mu = theta[0];
                vec![w * (y - mu) / (mu * (1.0 - mu))]
            }
            FamilyKind::Poisson => vec![w * (y / theta[0] - 1.0)],
            FamilyKind::Normal => {
                let (mu, s) = (theta[0], theta[1]);
                let r = y - mu;
                vec![w * r / (s * s), w * (-1.0 / s + r * r / s.powi(3))]
            }
            FamilyKind::Cumulative { .. } => {
                let (mu, vs) = self.cumulative_parts(theta);
                let l = y as usize - 1;
                vs[l].iter().map(|v| w * v / mu[l]).collect()
            }
            FamilyKind::Zip => {
                let (phi, l) = (theta[0], theta[1]);
                if y == 0.0 {
                    let e = (-l).exp();
                    let p = phi + (1.0 - phi) * e;
                    vec![w * -(-l).exp_m1() / p, -w * (1.0 - phi) * e / p]
                } else {
                    vec![-w / (1.0 - phi), w * (y / l - 1.0)]
                }
            }
        };
        Ok(u)
    }

    /// Sum over replicates of the squared θ-score and its θ-derivative (M = 1 only).
    pub fn score_sq(&self, theta: f64, y: f64, w: f64) -> Result<(f64, f64)> {
        match self.kind {
            FamilyKind::Binomial => {
                let mu = theta;
                let v = mu * (1.0 - mu);
                let q = y * (1.0 - mu).powi(2) + (1.0 - y) * mu * mu;
                let dq = 2.0 * (mu - y);
                Ok((w * q / (v * v), w * (dq / (v * v) - 2.0 * q * (1.0 - 2.0 * mu) / v.powi(3))))
            }
            FamilyKind::Poisson => {
                let l = theta;
                let r = y - l;
                Ok((w * r * r / (l * l), w * (-2.0 * r / (l * l) - 2.0 * r * r / l.powi(3))))
            }
            _ => Err(Error::Unsupported(format!("sandwich meat for {self}"))),
        }
    }

    /// Starting linear predictors, one vector of length M per observation.
    pub fn init_eta(&self, y: &[f64], w: &[f64]) -> Result<Vec<Vec<f64>>> {
        let total: f64 = w.iter().sum();
        let theta_rows: Vec<Vec<f64>> = match self.kind {
            FamilyKind::Binomial => {
                y.iter().zip(w).map(|(&yi, &wi)| vec![(wi * yi + 0.5) / (wi + 1.0)]).collect()
            }
            FamilyKind::Poisson => y.iter().map(|&yi| vec![yi + 0.125]).collect(),
            FamilyKind::Normal => {
                let mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
                let var = y.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / total;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                y.iter().map(|&yi| vec![yi, sd]).collect()
            }
            FamilyKind::Cumulative { levels, reversed } => {
                let mut counts = vec![0.0; levels];
                for (&yi, &wi) in y.iter().zip(w) {
                    counts[yi as usize - 1] += wi;
                }
                let denom = total + 0.5 * levels as f64;
                let mut acc = 0.0;
                let mut g = Vec::with_capacity(levels - 1);
                for c in counts.iter().take(levels - 1) {
                    acc += c + 0.5;
                    let gamma = acc / denom;
                    g.push(if reversed { 1.0 - gamma } else { gamma });
                }
                vec![g; y.len()]
            }
            FamilyKind::Zip => {
                let (mut pos_w, mut pos_sum, mut zero_w) = (0.0, 0.0, 0.0);
                for (&yi, &wi) in y.iter().zip(w) {
                    if yi > 0.0 {
                        pos_w += wi;
                        pos_sum += wi * yi;
                    } else {
                        zero_w += wi;
                    }
                }
                let lambda = if pos_w > 0.0 { pos_sum / pos_w } else { 0.5 };
                let e = (-lambda).exp();
                let excess = (zero_w / total - e) / (1.0 - e);
                let phi = excess.clamp(0.05, 0.95);
                vec![vec![phi, lambda]; y.len()]
            }
        };
        theta_rows.iter().map(|t| self.eta_from_theta(t)).collect()
    }
}

/// `W = EIM ∘ (d1 d1ᵀ)` with `d1 = dθ/dη`.
pub fn working_weight(links: &[LinkDerivBundle], eim: &Matrix) -> Matrix {
    let m = links.len();
    let mut w = Matrix::zeros(m, m);
    for u in 0..m {
        for v in 0..m {
            w[(u, v)] = eim[(u, v)] * links[u].d1 * links[v].d1;
        }
    }
    w
}

/// `∂W/∂η_j` for each j.
pub fn working_weight_deta(links: &[LinkDerivBundle], b: &EimBundle) -> Vec<Matrix> {
    let m = links.len();
    (0..m)
        .map(|j| {
            let mut d = Matrix::zeros(m, m);
            for u in 0..m {
                for v in 0..m {
                    let mut x = b.deim[j][(u, v)] * links[j].d1 * links[u].d1 * links[v].d1;
                    if u == j {
                        x += b.eim[(u, v)] * links[u].d2 * links[v].d1;
                    }
                    if v == j {
                        x += b.eim[(u, v)] * links[u].d1 * links[v].d2;
                    }
                    d[(u, v)] = x;
                }
            }
            d
        })
        .collect()
}

/// `d²w/dη²` for a single linear predictor.
pub fn working_weight_deta2_scalar(link: &LinkDerivBundle, b: &EimBundle) -> f64 {
    let (e, de, d2e) = (b.eim[(0, 0)], b.deim[0][(0, 0)], b.d2eim[0][(0, 0)]);
    let (d1, d2, d3) = (link.d1, link.d2, link.d3);
    d2e * d1.powi(4) + 5.0 * de * d1 * d1 * d2 + 2.0 * e * d2 * d2 + 2.0 * e * d1 * d3
}
