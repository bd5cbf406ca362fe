//! Target-logit margin functions ψ(θ).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Selects the margin function applied to the target-class angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginSpec {
    /// ψ(θ) = cos θ
    Plain,
    /// Piecewise multiplicative angular margin: ψ(θ) = (−1)^k cos(mθ) − 2k
    /// on θ ∈ [kπ/m, (k+1)π/m].
    Angular { m: u32 },
    /// ψ(θ) = cos(θ + α)
    AdditiveAngle { alpha: f64 },
    /// ψ(θ) = cos(m1·θ − m2) − m3
    Combined { m1: f64, m2: f64, m3: f64 },
}

impl MarginSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MarginSpec::Plain => Ok(()),
            MarginSpec::Angular { m } if m >= 1 => Ok(()),
            MarginSpec::Angular { m } => Err(Error::invalid("m", format!("must be >= 1, got {m}"))),
            MarginSpec::AdditiveAngle { alpha } if alpha >= 0.0 && alpha.is_finite() => Ok(()),
            MarginSpec::AdditiveAngle { alpha } => Err(Error::invalid(
                "alpha",
                format!("must be finite and >= 0, got {alpha}"),
            )),
            MarginSpec::Combined { m1, m2, m3 } => {
                if !(m1 >= 1.0 && m1.is_finite()) {
                    return Err(Error::invalid("m1", format!("must be >= 1, got {m1}")));
                }
                if !(m2 >= 0.0 && m2.is_finite()) {
                    return Err(Error::invalid("m2", format!("must be >= 0, got {m2}")));
                }
                if !(m3 >= 0.0 && m3.is_finite()) {
                    return Err(Error::invalid("m3", format!("must be >= 0, got {m3}")));
                }
                Ok(())
            }
        }
    }

    /// Knot positions of the piecewise form, excluding the endpoints.
    pub fn knots(&self) -> Vec<f64> {
        match *self {
            MarginSpec::Angular { m } => (1..m).map(|k| k as f64 * PI / m as f64).collect(),
            _ => Vec::new(),
        }
    }
}

/// Value of branch `k` of the angular margin, evaluated anywhere.
pub fn angular_branch(m: u32, k: u32, theta: f64) -> f64 {
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * (m as f64 * theta).cos() - 2.0 * k as f64
}

/// Branch index for θ; knots resolve to the left branch.
fn angular_branch_index(m: u32, theta: f64) -> u32 {
    let t = m as f64 * theta / PI;
    let k = t.floor();
    let k = if k == t && k >= 1.0 { k - 1.0 } else { k };
    (k.max(0.0) as u32).min(m - 1)
}

fn check_theta(theta: f64) -> Result<()> {
    if (0.0..=PI).contains(&theta) {
        Ok(())
    } else {
        Err(Error::invalid("theta", format!("{theta} is outside [0, pi]")))
    }
}

pub fn psi_eval(spec: MarginSpec, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    spec.validate()?;
    Ok(psi_unchecked(spec, theta))
}

pub(crate) fn psi_unchecked(spec: MarginSpec, theta: f64) -> f64 {
    match spec {
        MarginSpec::Plain => theta.cos(),
        MarginSpec::Angular { m } => angular_branch(m, angular_branch_index(m, theta), theta),
        MarginSpec::AdditiveAngle { alpha } => (theta + alpha).cos(),
        MarginSpec::Combined { m1, m2, m3 } => (m1 * theta - m2).cos() - m3,
    }
}

/// Chebyshev polynomial of the second kind, `U_n(u)`.
fn chebyshev_u(n: u32, u: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 2.0 * u);
    if n == 0 {
        return prev;
    }
    for _ in 1..n {
        let next = 2.0 * u * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// dψ/d(cos θ) at θ, where `cos_theta = cos θ`.
///
/// The angular form goes through `cos(mθ) = T_m(cos θ)` so it stays finite
/// at θ ∈ {0, π}. The other forms divide by sin θ, floored at 1e-12.
pub(crate) fn psi_dcos(spec: MarginSpec, theta: f64, cos_theta: f64) -> f64 {
    match spec {
        MarginSpec::Plain => 1.0,
        MarginSpec::Angular { m } => {
            let k = angular_branch_index(m, theta);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * m as f64 * chebyshev_u(m - 1, cos_theta)
        }
        MarginSpec::AdditiveAngle { alpha } => (theta + alpha).sin() / theta.sin().max(1e-12),
        MarginSpec::Combined { m1, m2, .. } => m1 * (m1 * theta - m2).sin() / theta.sin().max(1e-12),
    }
}
