//! Link functions `η = g(θ)` with derivatives of the inverse up to third order.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::stats::{normal_cdf as std_normal_cdf, normal_pdf as std_normal_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Logit,
    Probit,
    Cloglog,
    Log,
    Identity,
    NegIdentity,
}

impl LinkKind {
    pub fn name(self) -> &'static str {
        match self {
            LinkKind::Logit => "logit",
            LinkKind::Probit => "probit",
            LinkKind::Cloglog => "cloglog",
            LinkKind::Log => "log",
            LinkKind::Identity => "identity",
            LinkKind::NegIdentity => "negidentity",
        }
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_suffix("link").unwrap_or(&key);
        match key {
            "logit" => Ok(LinkKind::Logit),
            "probit" => Ok(LinkKind::Probit),
            "cloglog" => Ok(LinkKind::Cloglog),
            "log" => Ok(LinkKind::Log),
            "identity" => Ok(LinkKind::Identity),
            "negidentity" => Ok(LinkKind::NegIdentity),
            _ => Err(Error::Unsupported(format!("link '{s}'"))),
        }
    }
}

/// `θ = g⁻¹(η)` and its first three derivatives with respect to `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkDerivBundle {
    pub theta: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

fn check_finite(eta: f64) -> Result<()> {
    if eta.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite linear predictor {eta}")))
    }
}

/// Evaluate the inverse link and its derivatives at `eta`.
pub fn eval_link(link: LinkKind, eta: f64) -> Result<LinkDerivBundle> {
    check_finite(eta)?;
    let b = match link {
        LinkKind::Logit => {
            // μ(1-μ) without cancellation for large |η|.
            let e = (-eta.abs()).exp();
            let mu = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            let v = e / ((1.0 + e) * (1.0 + e));
            let one_minus_2mu = if eta >= 0.0 { -(1.0 - e) / (1.0 + e) } else { (1.0 - e) / (1.0 + e) };
            LinkDerivBundle { theta: mu, d1: v, d2: v * one_minus_2mu, d3: v * (1.0 - 6.0 * v) }
        }
        LinkKind::Probit => {
            let phi = std_normal_pdf(eta);
            LinkDerivBundle {
                theta: std_normal_cdf(eta),
                d1: phi,
                d2: -eta * phi,
                d3: (eta * eta - 1.0) * phi,
            }
        }
        LinkKind::Cloglog => {
            let t = eta.exp();
            let et = (-t).exp();
            LinkDerivBundle {
                theta: -(-t).exp_m1(),
                d1: t * et,
                d2: t * (1.0 - t) * et,
                d3: t * (1.0 - 3.0 * t + t * t) * et,
            }
        }
        LinkKind::Log => {
            let t = eta.exp();
            LinkDerivBundle { theta: t, d1: t, d2: t, d3: t }
        }
        LinkKind::Identity => LinkDerivBundle { theta: eta, d1: 1.0, d2: 0.0, d3: 0.0 },
        LinkKind::NegIdentity => LinkDerivBundle { theta: -eta, d1: -1.0, d2: 0.0, d3: 0.0 },
    };
    if !b.theta.is_finite() || !b.d1.is_finite() {
        return Err(Error::Domain(format!("{link} inverse overflowed at eta = {eta}")));
    }
    Ok(b)
}

/// `η = g(θ)`.
pub fn link_fun(link: LinkKind, theta: f64) -> Result<f64> {
    let in_unit = |t: f64| t > 0.0 && t < 1.0;
    let eta = match link {
        LinkKind::Logit if in_unit(theta) => (theta / (1.0 - theta)).ln(),
        LinkKind::Probit if in_unit(theta) => {
            let z = -SQRT_2 * erfc_inv(2.0 * theta);
            // one Newton step against the accurate cdf
            z - (std_normal_cdf(z) - theta) / std_normal_pdf(z)
        }
        LinkKind::Cloglog if in_unit(theta) => (-(-theta).ln_1p()).ln(),
        LinkKind::Log if theta > 0.0 => theta.ln(),
        LinkKind::Identity => theta,
        LinkKind::NegIdentity => -theta,
        _ => return Err(Error::Domain(format!("theta = {theta} outside the domain of {link}"))),
    };
    Ok(eta)
}

/// Derivatives `dη/dθ`, `d²η/dθ²`, `d³η/dθ³` of the link itself.
pub fn link_derivs(link: LinkKind, theta: f64) -> Result<[f64; 3]> {
    let eta = link_fun(link, theta)?;
    let out = match link {
        LinkKind::Logit => {
            let v = theta * (1.0 - theta);
            [1.0 / v, (2.0 * theta - 1.0) / (v * v), 2.0 * (1.0 - 3.0 * v) / (v * v * v)]
        }
        LinkKind::Probit => {
            let p = std_normal_pdf(eta);
            [1.0 / p, eta / (p * p), (1.0 + 2.0 * eta * eta) / (p * p * p)]
        }
        LinkKind::Cloglog => {
            let l = -(-theta).ln_1p();
            let d = l * (1.0 - theta);
            [1.0 / d, (l - 1.0) / (d * d), (l + 2.0 * (l - 1.0) * (l - 1.0)) / (d * d * d)]
        }
        LinkKind::Log => [1.0 / theta, -1.0 / (theta * theta), 2.0 / (theta * theta * theta)],
        LinkKind::Identity => [1.0, 0.0, 0.0],
        LinkKind::NegIdentity => [-1.0, 0.0, 0.0],
    };
    Ok(out)
}

/// Whether `theta` is inside the parameter space the link maps onto.
pub fn in_range(link: LinkKind, theta: f64) -> bool {
    match link {
        LinkKind::Logit | LinkKind::Probit | LinkKind::Cloglog => theta > 0.0 && theta < 1.0,
        LinkKind::Log => theta > 0.0,
        LinkKind::Identity | LinkKind::NegIdentity => theta.is_finite(),
    }
}
