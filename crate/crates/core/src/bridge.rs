//! The four parametric confounding-bridge families and their gradients.
//!
//! Two outcome-side bridges are linear in their coefficients,
//!
//! ```text
//! h1(w, m, x; b1) = b1_0 + b1_w'w + b1_m m + b1_x'x
//! h0(w, x; b0)    = b0_0 + b0_w'w + b0_x'x
//! ```
//!
//! and two treatment-side bridges are log-linear,
//!
//! ```text
//! q0(z, x; g0)    = 1 + exp(-(g0_0 + g0_z'z + g0_x'x))
//! q1(z, m, x; g1) = q0(z, x) * exp(g1_0 + g1_z'z + g1_m m + g1_x'x)
//! ```
//!
//! `q1` is fixed to this product form. Callers featurize covariates before
//! evaluation; the `x` passed here is already transformed.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::FeatureMap;
use crate::error::{Error, Result};

/// Exponent clamp bound; arguments outside `[-EXP_CLAMP, EXP_CLAMP]` are
/// clipped before exponentiation so that transient solver iterates cannot
/// overflow. Clamp events are counted by the fitting layer.
pub const EXP_CLAMP: f64 = 700.0;

/// Fitted coefficient vectors for the four bridges.
///
/// Layouts: `beta1 = (intercept, w.., m, x..)`, `beta0 = (intercept, w.., x..)`,
/// `gamma0 = (intercept, z.., x..)`, `gamma1 = (intercept, z.., m, x..)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeParams {
    pub beta1: Vec<f64>,
    pub beta0: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
}

impl BridgeParams {
    pub fn dims_match(&self, p_w: usize, p_z: usize, p_x: usize) -> bool {
        self.beta1.len() == 2 + p_w + p_x
            && self.beta0.len() == 1 + p_w + p_x
            && self.gamma0.len() == 1 + p_z + p_x
            && self.gamma1.len() == 2 + p_z + p_x
    }

    pub fn all_finite(&self) -> bool {
        self.beta1
            .iter()
            .chain(&self.beta0)
            .chain(&self.gamma0)
            .chain(&self.gamma1)
            .all(|v| v.is_finite())
    }
}

/// Which bridge a generic operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeKind {
    H1,
    H0,
    Q0,
    Q1,
}

impl FromStr for BridgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h1" => Ok(Self::H1),
            "h0" => Ok(Self::H0),
            "q0" => Ok(Self::Q0),
            "q1" => Ok(Self::Q1),
            other => Err(Error::Invalid(format!("unknown bridge tag `{other}`"))),
        }
    }
}

/// Functional form of the `q1` bridge; only the product form is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Q1Form {
    #[default]
    Simplified,
}

/// Per-bridge covariate feature maps, enabling bridge-by-bridge
/// misspecification in simulation studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub h1_features: FeatureMap,
    pub h0_features: FeatureMap,
    pub q0_features: FeatureMap,
    pub q1_features: FeatureMap,
    pub q1_form: Q1Form,
}

impl BridgeSpec {
    /// Identity features for every bridge (the correctly specified setting
    /// for the simulation design).
    pub fn identity(p_x: usize) -> Self {
        Self {
            h1_features: FeatureMap::identity(p_x),
            h0_features: FeatureMap::identity(p_x),
            q0_features: FeatureMap::identity(p_x),
            q1_features: FeatureMap::identity(p_x),
            q1_form: Q1Form::Simplified,
        }
    }

    pub fn features_for(&self, kind: BridgeKind) -> &FeatureMap {
        match kind {
            BridgeKind::H1 => &self.h1_features,
            BridgeKind::H0 => &self.h0_features,
            BridgeKind::Q0 => &self.q0_features,
            BridgeKind::Q1 => &self.q1_features,
        }
    }

    pub fn check_dims(&self, p_x: usize) -> Result<()> {
        for kind in [
            BridgeKind::H1,
            BridgeKind::H0,
            BridgeKind::Q0,
            BridgeKind::Q1,
        ] {
            if self.features_for(kind).len() != p_x {
                return Err(Error::Dimension(format!(
                    "{kind:?} feature map covers {} covariates, dataset has {p_x}",
                    self.features_for(kind).len()
                )));
            }
        }
        Ok(())
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{name}: parameter length {got}, expected {want}"
        )))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `h1(w, m, x)`.
pub fn eval_h1(beta1: &[f64], w: &[f64], m: f64, x: &[f64]) -> Result<f64> {
    check_len("h1", beta1.len(), 2 + w.len() + x.len())?;
    let (b_w, rest) = beta1[1..].split_at(w.len());
    Ok(beta1[0] + dot(b_w, w) + rest[0] * m + dot(&rest[1..], x))
}

/// `h0(w, x)`.
pub fn eval_h0(beta0: &[f64], w: &[f64], x: &[f64]) -> Result<f64> {
    check_len("h0", beta0.len(), 1 + w.len() + x.len())?;
    let (b_w, b_x) = beta0[1..].split_at(w.len());
    Ok(beta0[0] + dot(b_w, w) + dot(b_x, x))
}

/// Clamped exponential with an indicator of whether the clamp engaged.
pub(crate) fn exp_clamped(arg: f64) -> (f64, bool) {
    if arg > EXP_CLAMP {
        (EXP_CLAMP.exp(), true)
    } else if arg < -EXP_CLAMP {
        ((-EXP_CLAMP).exp(), true)
    } else {
        (arg.exp(), false)
    }
}

pub(crate) fn q0_linear(gamma0: &[f64], z: &[f64], x: &[f64]) -> f64 {
    let (g_z, g_x) = gamma0[1..].split_at(z.len());
    gamma0[0] + dot(g_z, z) + dot(g_x, x)
}

pub(crate) fn q1_linear(gamma1: &[f64], z: &[f64], m: f64, x: &[f64]) -> f64 {
    let (g_z, rest) = gamma1[1..].split_at(z.len());
    gamma1[0] + dot(g_z, z) + rest[0] * m + dot(&rest[1..], x)
}

pub(crate) fn eval_q0_parts(gamma0: &[f64], z: &[f64], x: &[f64]) -> Result<(f64, bool)> {
    check_len("q0", gamma0.len(), 1 + z.len() + x.len())?;
    let (e, clamped) = exp_clamped(-q0_linear(gamma0, z, x));
    Ok((1.0 + e, clamped))
}

/// `q0(z, x) = 1 + exp(-(g0'(1, z, x)))`; always `> 1`.
pub fn eval_q0(gamma0: &[f64], z: &[f64], x: &[f64]) -> Result<f64> {
    eval_q0_parts(gamma0, z, x).map(|(v, _)| v)
}

pub(crate) fn eval_q1_parts(
    gamma1: &[f64],
    gamma0: &[f64],
    z: &[f64],
    m: f64,
    x: &[f64],
) -> Result<(f64, bool)> {
    check_len("q1", gamma1.len(), 2 + z.len() + x.len())?;
    let (q0, c0) = eval_q0_parts(gamma0, z, x)?;
    let (e1, c1) = exp_clamped(q1_linear(gamma1, z, m, x));
    Ok((q0 * e1, c0 || c1))
}

/// `q1(z, m, x) = q0(z, x) * exp(g1'(1, z, m, x))`; always `> 0`.
pub fn eval_q1(gamma1: &[f64], gamma0: &[f64], z: &[f64], m: f64, x: &[f64]) -> Result<f64> {
    eval_q1_parts(gamma1, gamma0, z, m, x).map(|(v, _)| v)
}

/// Evaluation point for the generic gradient dispatcher.
#[derive(Debug, Clone, Copy)]
pub struct BridgePoint<'a> {
    pub w: &'a [f64],
    pub z: &'a [f64],
    pub m: f64,
    pub x: &'a [f64],
}

/// Analytic gradient of a bridge with respect to its own parameters.
///
/// For the linear bridges this is the feature vector; for `q0` it is
/// `-exp(-lin) * (1, z, x)`; for `q1` it is `q1 * (1, z, m, x)` (`gamma0`
/// held fixed).
pub fn grad_params(
    kind: BridgeKind,
    params: &[f64],
    gamma0: Option<&[f64]>,
    point: &BridgePoint<'_>,
) -> Result<Vec<f64>> {
    match kind {
        BridgeKind::H1 => {
            check_len("h1", params.len(), 2 + point.w.len() + point.x.len())?;
            let mut g = Vec::with_capacity(params.len());
            g.push(1.0);
            g.extend_from_slice(point.w);
            g.push(point.m);
            g.extend_from_slice(point.x);
            Ok(g)
        }
        BridgeKind::H0 => {
            check_len("h0", params.len(), 1 + point.w.len() + point.x.len())?;
            let mut g = Vec::with_capacity(params.len());
            g.push(1.0);
            g.extend_from_slice(point.w);
            g.extend_from_slice(point.x);
            Ok(g)
        }
        BridgeKind::Q0 => {
            check_len("q0", params.len(), 1 + point.z.len() + point.x.len())?;
            let (e, _) = exp_clamped(-q0_linear(params, point.z, point.x));
            let mut g = Vec::with_capacity(params.len());
            g.push(-e);
            g.extend(point.z.iter().map(|z| -e * z));
            g.extend(point.x.iter().map(|x| -e * x));
            Ok(g)
        }
        BridgeKind::Q1 => {
            let gamma0 = gamma0.ok_or_else(|| {
                Error::Invalid("q1 gradient requires gamma0 as fixed input".into())
            })?;
            let (q1, _) = eval_q1_parts(params, gamma0, point.z, point.m, point.x)?;
            let mut g = Vec::with_capacity(params.len());
            g.push(q1);
            g.extend(point.z.iter().map(|z| q1 * z));
            g.push(q1 * point.m);
            g.extend(point.x.iter().map(|x| q1 * x));
            Ok(g)
        }
    }
}
