//! Folded-concave penalties (MCP, SCAD) and the lasso, with the scalar and
//! group proximal maps used by the coordinate updates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Concavity used when none is given for MCP.
pub const DEFAULT_MCP_OMEGA: f64 = 3.0;
/// Concavity used when none is given for SCAD.
pub const DEFAULT_SCAD_OMEGA: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Mcp,
    Scad,
    L1,
}

impl PenaltyKind {
    pub fn default_omega(self) -> f64 {
        match self {
            PenaltyKind::Mcp => DEFAULT_MCP_OMEGA,
            PenaltyKind::Scad => DEFAULT_SCAD_OMEGA,
            PenaltyKind::L1 => f64::INFINITY,
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::Mcp => "mcp",
            PenaltyKind::Scad => "scad",
            PenaltyKind::L1 => "l1",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcp" => Ok(PenaltyKind::Mcp),
            "scad" => Ok(PenaltyKind::Scad),
            "l1" | "lasso" => Ok(PenaltyKind::L1),
            other => Err(Error::Unsupported(format!("unknown penalty '{other}'"))),
        }
    }
}

/// A penalty `ρ(t; λ, ω)` on a nonnegative magnitude `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub omega: f64,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambda: f64, omega: f64) -> Result<Self> {
        if !(lambda >= 0.0) || lambda.is_nan() {
            return Err(contract(format!("lambda must be nonnegative, got {lambda}")));
        }
        let ok = match kind {
            PenaltyKind::Mcp => omega > 1.0,
            PenaltyKind::Scad => omega > 2.0,
            PenaltyKind::L1 => true,
        };
        if !ok {
            return Err(contract(format!("omega {omega} is invalid for {kind}")));
        }
        Ok(PenaltySpec { kind, lambda, omega })
    }

    /// MCP with `ω = 3`.
    pub fn mcp(lambda: f64) -> Self {
        PenaltySpec {
            kind: PenaltyKind::Mcp,
            lambda,
            omega: DEFAULT_MCP_OMEGA,
        }
    }

    pub fn scad(lambda: f64) -> Self {
        PenaltySpec {
            kind: PenaltyKind::Scad,
            lambda,
            omega: DEFAULT_SCAD_OMEGA,
        }
    }

    pub fn l1(lambda: f64) -> Self {
        PenaltySpec {
            kind: PenaltyKind::L1,
            lambda,
            omega: f64::INFINITY,
        }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        PenaltySpec { lambda, ..self }
    }

    /// `ρ(t)` for `t ≥ 0` (the sign of `t` is ignored).
    pub fn value(&self, t: f64) -> f64 {
        let t = t.abs();
        let (l, w) = (self.lambda, self.omega);
        match self.kind {
            PenaltyKind::L1 => l * t,
            PenaltyKind::Mcp => {
                if t <= w * l {
                    l * t - t * t / (2.0 * w)
                } else {
                    w * l * l / 2.0
                }
            }
            PenaltyKind::Scad => {
                if t <= l {
                    l * t
                } else if t <= w * l {
                    (2.0 * w * l * t - t * t - l * l) / (2.0 * (w - 1.0))
                } else {
                    l * l * (w + 1.0) / 2.0
                }
            }
        }
    }

    /// `ρ'(t)`; at `t = 0` this is the right derivative `λ`.
    pub fn derivative(&self, t: f64) -> f64 {
        let t = t.abs();
        let (l, w) = (self.lambda, self.omega);
        match self.kind {
            PenaltyKind::L1 => l,
            PenaltyKind::Mcp => (l - t / w).max(0.0),
            PenaltyKind::Scad => {
                if t <= l {
                    l
                } else {
                    ((w * l - t) / (w - 1.0)).max(0.0)
                }
            }
        }
    }

    /// Curvature a quadratic must strictly exceed for `½v b² + ρ(|b|)` to be
    /// convex: `1/ω` for MCP, `1/(ω−1)` for SCAD, 0 for the lasso.
    pub fn min_curvature(&self) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        match self.kind {
            PenaltyKind::L1 => 0.0,
            PenaltyKind::Mcp => 1.0 / self.omega,
            PenaltyKind::Scad => 1.0 / (self.omega - 1.0),
        }
    }

    /// `ζ` magnitude at or below which the prox with curvature `v` returns 0.
    pub fn dead_zone(&self) -> f64 {
        self.lambda
    }
}

pub fn penalty_value(spec: &PenaltySpec, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(contract(format!("penalty argument must be nonnegative, got {t}")));
    }
    Ok(spec.value(t))
}

pub fn penalty_derivative(spec: &PenaltySpec, t: f64) -> f64 {
    spec.derivative(t)
}

fn check_curvature(spec: &PenaltySpec, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(contract(format!("curvature must be positive, got {v}")));
    }
    if spec.lambda > 0.0 && v <= spec.min_curvature() {
        return Err(Error::Unsupported(format!(
            "{} subproblem is nonconvex: curvature {v} with omega {}",
            spec.kind, spec.omega
        )));
    }
    Ok(())
}

/// `argmin_b ½v(b − ζ/v)² + ρ(|b|)`.
pub fn scalar_prox(spec: &PenaltySpec, zeta: f64, v: f64) -> Result<f64> {
    check_curvature(spec, v)?;
    Ok(prox_unchecked(spec, zeta, v))
}

#[inline]
pub(crate) fn prox_unchecked(spec: &PenaltySpec, zeta: f64, v: f64) -> f64 {
    let (l, w) = (spec.lambda, spec.omega);
    let a = zeta.abs();
    let s = zeta.signum();
    if l == 0.0 {
        return zeta / v;
    }
    if a <= l {
        return 0.0;
    }
    match spec.kind {
        PenaltyKind::L1 => s * (a - l) / v,
        PenaltyKind::Mcp => {
            if a <= v * w * l {
                s * (a - l) / (v - 1.0 / w)
            } else {
                zeta / v
            }
        }
        PenaltyKind::Scad => {
            if a <= l * (1.0 + v) {
                s * (a - l) / v
            } else if a <= v * w * l {
                s * ((w - 1.0) * a - w * l) / (v * (w - 1.0) - 1.0)
            } else {
                zeta / v
            }
        }
    }
}

/// `argmin_b ½v‖b − ζ/v‖² + ρ(‖b‖₂)`: the scalar prox applied to `‖ζ‖` along
/// the direction of `ζ`.
pub fn group_prox(spec: &PenaltySpec, zeta: &[f64], v: f64) -> Result<Vec<f64>> {
    check_curvature(spec, v)?;
    Ok(group_prox_unchecked(spec, zeta, v))
}

pub(crate) fn group_prox_unchecked(spec: &PenaltySpec, zeta: &[f64], v: f64) -> Vec<f64> {
    let norm = zeta.iter().map(|z| z * z).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; zeta.len()];
    }
    let m = prox_unchecked(spec, norm, v);
    if m == 0.0 {
        return vec![0.0; zeta.len()];
    }
    zeta.iter().map(|z| z * (m / norm)).collect()
}
