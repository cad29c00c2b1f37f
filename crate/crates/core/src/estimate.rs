//! Point estimators: the four proxy-based estimators of the mediation
//! functional, the per-arm doubly robust mean estimator, effect contrasts,
//! an OLS benchmark, and the randomized-trial specializations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bridge::{exp_clamped, BridgeParams, BridgeSpec};
use crate::data::{require_valid, FeatureMap, MediationDataset};
use crate::error::{Error, Result};
use crate::linalg::solve_conditioned;
use crate::solve::{
    assemble, bridge_designs, fit_beta0, fit_beta1, fit_gamma0, fit_gamma1,
    newton_solve_multistart, weighted_linear_fit, Block, BridgeDesigns, InverseArmSystem,
    MomentSystem, ProductArmSystem, SolveReport, NEWTON_MAX_ITER, NEWTON_TOL,
};

/// Which functional an estimate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "psi_10")]
    Psi10,
    #[serde(rename = "ey0")]
    Ey0,
    #[serde(rename = "ey1")]
    Ey1,
    #[serde(rename = "nde_0")]
    Nde0,
    #[serde(rename = "nde_1")]
    Nde1,
    #[serde(rename = "nie_0")]
    Nie0,
    #[serde(rename = "nie_1")]
    Nie1,
    #[serde(rename = "total")]
    Total,
}

/// Estimation strategy tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "P-OR")]
    POr,
    #[serde(rename = "P-hybrid")]
    PHybrid,
    #[serde(rename = "P-IPW")]
    PIpw,
    #[serde(rename = "P-MR")]
    PMr,
    #[serde(rename = "P-DR")]
    PDr,
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "RCT-OR")]
    RctOr,
    #[serde(rename = "RCT-IPW")]
    RctIpw,
    #[serde(rename = "RCT-MR")]
    RctMr,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::POr => "P-OR",
            Method::PHybrid => "P-hybrid",
            Method::PIpw => "P-IPW",
            Method::PMr => "P-MR",
            Method::PDr => "P-DR",
            Method::Ols => "OLS",
            Method::RctOr => "RCT-OR",
            Method::RctIpw => "RCT-IPW",
            Method::RctMr => "RCT-MR",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P-OR" => Ok(Method::POr),
            "P-hybrid" => Ok(Method::PHybrid),
            "P-IPW" => Ok(Method::PIpw),
            "P-MR" => Ok(Method::PMr),
            "P-DR" => Ok(Method::PDr),
            "OLS" => Ok(Method::Ols),
            "RCT-OR" => Ok(Method::RctOr),
            "RCT-IPW" => Ok(Method::RctIpw),
            "RCT-MR" => Ok(Method::RctMr),
            other => Err(Error::Invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// A named solver outcome carried along for diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedSolve {
    pub name: String,
    pub report: SolveReport,
}

/// A point estimate with optional inference attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimand: Estimand,
    pub method: Method,
    pub point: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub solves: Vec<NamedSolve>,
}

impl EstimateResult {
    pub fn bare(estimand: Estimand, method: Method, point: f64) -> Self {
        Self {
            estimand,
            method,
            point,
            se: None,
            ci: None,
            solves: Vec::new(),
        }
    }

    pub fn with_normal_ci(mut self, se: f64) -> Self {
        self.se = Some(se);
        self.ci = Some((self.point - 1.96 * se, self.point + 1.96 * se));
        self
    }
}

/// The bridge fits a dataset admits under one specification. Bridges not
/// needed by the requested methods stay `None`.
#[derive(Debug, Clone)]
pub struct FittedBridges {
    pub spec: BridgeSpec,
    pub beta1: Option<SolveReport>,
    pub beta0: Option<SolveReport>,
    pub gamma0: Option<SolveReport>,
    pub gamma1: Option<SolveReport>,
}

impl FittedBridges {
    /// Fit every bridge the given methods need, sequentially
    /// (`beta1 -> beta0`, `gamma0 -> gamma1`). The dataset must validate.
    pub fn fit_for(data: &MediationDataset, spec: &BridgeSpec, methods: &[Method]) -> Result<Self> {
        require_valid(data)?;
        spec.check_dims(data.p_x())?;
        let needs = |ms: &[Method]| methods.iter().any(|m| ms.contains(m));
        let need_beta1 = needs(&[Method::POr, Method::PHybrid, Method::PMr]);
        let need_beta0 = needs(&[Method::POr, Method::PMr]);
        let need_gamma0 = needs(&[Method::PHybrid, Method::PIpw, Method::PMr]);
        let need_gamma1 = needs(&[Method::PIpw, Method::PMr]);

        let beta1 = if need_beta1 {
            Some(fit_beta1(data, spec)?)
        } else {
            None
        };
        let beta0 = if need_beta0 {
            let b1 = beta1.as_ref().expect("beta0 implies beta1");
            Some(fit_beta0(data, spec, &b1.params)?)
        } else {
            None
        };
        let gamma0 = if need_gamma0 {
            Some(fit_gamma0(data, spec, None)?)
        } else {
            None
        };
        let gamma1 = if need_gamma1 {
            let g0 = gamma0.as_ref().expect("gamma1 implies gamma0");
            Some(fit_gamma1(data, spec, &g0.params, None)?)
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            beta1,
            beta0,
            gamma0,
            gamma1,
        })
    }

    /// Fit all four bridges.
    pub fn fit_all(data: &MediationDataset, spec: &BridgeSpec) -> Result<Self> {
        Self::fit_for(data, spec, &[Method::PMr, Method::POr])
    }

    /// Fit as many bridges as the data admit, leaving failed slots empty
    /// instead of aborting. Used by the simulation harness so that a
    /// diverging treatment-side solve (weak proxies) still yields the
    /// outcome-side estimators and diagnostics of whatever did fit.
    pub fn fit_best_effort(data: &MediationDataset, spec: &BridgeSpec) -> Result<Self> {
        require_valid(data)?;
        spec.check_dims(data.p_x())?;
        let beta1 = fit_beta1(data, spec).ok();
        let beta0 = beta1
            .as_ref()
            .and_then(|b1| fit_beta0(data, spec, &b1.params).ok());
        let gamma0 = fit_gamma0(data, spec, None).ok();
        let gamma1 = gamma0
            .as_ref()
            .and_then(|g0| fit_gamma1(data, spec, &g0.params, None).ok());
        Ok(Self {
            spec: spec.clone(),
            beta1,
            beta0,
            gamma0,
            gamma1,
        })
    }

    pub(crate) fn require(&self, name: &'static str) -> Result<&SolveReport> {
        let slot = match name {
            "beta1" => &self.beta1,
            "beta0" => &self.beta0,
            "gamma0" => &self.gamma0,
            "gamma1" => &self.gamma1,
            _ => unreachable!("unknown bridge {name}"),
        };
        match slot {
            Some(r) if r.converged => Ok(r),
            _ => Err(Error::UnconvergedBridge(name)),
        }
    }

    /// Largest Jacobian condition estimate across the fitted systems.
    pub fn max_condition(&self) -> f64 {
        [&self.beta1, &self.beta0, &self.gamma0, &self.gamma1]
            .into_iter()
            .flatten()
            .fold(0.0f64, |acc, r| acc.max(r.condition))
    }

    /// Collapse into the serializable coefficient bundle; requires all four
    /// bridges fitted.
    pub fn params(&self) -> Result<BridgeParams> {
        Ok(BridgeParams {
            beta1: self.require("beta1")?.params.clone(),
            beta0: self.require("beta0")?.params.clone(),
            gamma0: self.require("gamma0")?.params.clone(),
            gamma1: self.require("gamma1")?.params.clone(),
        })
    }

    fn named_solves(&self) -> Vec<NamedSolve> {
        [
            ("beta1", &self.beta1),
            ("beta0", &self.beta0),
            ("gamma0", &self.gamma0),
            ("gamma1", &self.gamma1),
        ]
        .into_iter()
        .filter_map(|(name, slot)| {
            slot.as_ref().map(|report| NamedSolve {
                name: name.to_string(),
                report: report.clone(),
            })
        })
        .collect()
    }
}

/// Per-row bridge evaluations used by estimators and the stacked sandwich.
pub(crate) struct Evaluated {
    pub designs: BridgeDesigns,
    pub h1: Option<Vec<f64>>,
    pub h0: Option<Vec<f64>>,
    pub q0: Option<Vec<f64>>,
    /// `d q0 / d lin = -exp(-lin0)` per row.
    pub q0_slope: Option<Vec<f64>>,
    /// `exp(lin1)` per row.
    pub e1: Option<Vec<f64>>,
    pub q1: Option<Vec<f64>>,
}

pub(crate) fn evaluate_bridges(data: &MediationDataset, bridges: &FittedBridges) -> Evaluated {
    let designs = bridge_designs(data, &bridges.spec);
    let linear = |mat: &DMatrix<f64>, params: &[f64]| -> Vec<f64> {
        let v = mat * DVector::from_column_slice(params);
        v.iter().copied().collect()
    };
    let h1 = bridges
        .beta1
        .as_ref()
        .map(|r| linear(&designs.f1, &r.params));
    let h0 = bridges
        .beta0
        .as_ref()
        .map(|r| linear(&designs.f0, &r.params));
    let (q0, q0_slope) = match bridges.gamma0.as_ref() {
        Some(r) => {
            let lin = linear(&designs.u0, &r.params);
            let mut q = Vec::with_capacity(lin.len());
            let mut s = Vec::with_capacity(lin.len());
            for t in lin {
                let (e, _) = exp_clamped(-t);
                q.push(1.0 + e);
                s.push(-e);
            }
            (Some(q), Some(s))
        }
        None => (None, None),
    };
    let (e1, q1) = match (bridges.gamma1.as_ref(), q0.as_ref()) {
        (Some(r), Some(q0)) => {
            let lin = linear(&designs.u1, &r.params);
            let e1: Vec<f64> = lin.iter().map(|&t| exp_clamped(t).0).collect();
            let q1 = e1.iter().zip(q0).map(|(e, q)| e * q).collect();
            (Some(e1), Some(q1))
        }
        _ => (None, None),
    };
    Evaluated {
        designs,
        h1,
        h0,
        q0,
        q0_slope,
        e1,
        q1,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in v {
        sum += x;
        n += 1;
    }
    sum / n as f64
}

/// One row's contribution to the multiply robust estimator.
pub fn mr_summand(y: f64, a: f64, h1: f64, h0: f64, q0: f64, q1: f64) -> f64 {
    a * q1 * (y - h1) + (1.0 - a) * q0 * (h1 - h0) + h0
}

/// Outcome-bridge estimator: the sample mean of `h0(W, X)`.
pub fn psi_por(data: &MediationDataset, bridges: &FittedBridges) -> Result<EstimateResult> {
    bridges.require("beta1")?;
    bridges.require("beta0")?;
    let eval = evaluate_bridges(data, bridges);
    let h0 = eval.h0.expect("beta0 present");
    let point = mean(h0.iter().copied());
    Ok(EstimateResult {
        solves: bridges.named_solves(),
        ..EstimateResult::bare(Estimand::Psi10, Method::POr, point)
    })
}

/// Hybrid estimator: mean of `(1 - A) q0 h1`.
pub fn psi_phybrid(data: &MediationDataset, bridges: &FittedBridges) -> Result<EstimateResult> {
    bridges.require("beta1")?;
    bridges.require("gamma0")?;
    let eval = evaluate_bridges(data, bridges);
    let h1 = eval.h1.expect("beta1 present");
    let q0 = eval.q0.expect("gamma0 present");
    let point = mean(
        data.a()
            .iter()
            .zip(&h1)
            .zip(&q0)
            .map(|((a, h), q)| (1.0 - a) * q * h),
    );
    Ok(EstimateResult {
        solves: bridges.named_solves(),
        ..EstimateResult::bare(Estimand::Psi10, Method::PHybrid, point)
    })
}

/// Treatment-bridge estimator: mean of `A q1 Y`.
pub fn psi_pipw(data: &MediationDataset, bridges: &FittedBridges) -> Result<EstimateResult> {
    bridges.require("gamma0")?;
    bridges.require("gamma1")?;
    let eval = evaluate_bridges(data, bridges);
    let q1 = eval.q1.expect("gamma1 present");
    let point = mean(
        data.a()
            .iter()
            .zip(data.y())
            .zip(&q1)
            .map(|((a, y), q)| a * q * y),
    );
    Ok(EstimateResult {
        solves: bridges.named_solves(),
        ..EstimateResult::bare(Estimand::Psi10, Method::PIpw, point)
    })
}

/// Multiply robust estimator: mean of
/// `A q1 (Y - h1) + (1-A) q0 (h1 - h0) + h0`.
pub fn psi_pmr(data: &MediationDataset, bridges: &FittedBridges) -> Result<EstimateResult> {
    for name in ["beta1", "beta0", "gamma0", "gamma1"] {
        bridges.require(name)?;
    }
    let eval = evaluate_bridges(data, bridges);
    let h1 = eval.h1.expect("beta1 present");
    let h0 = eval.h0.expect("beta0 present");
    let q0 = eval.q0.expect("gamma0 present");
    let q1 = eval.q1.expect("gamma1 present");
    let point = mean(
        (0..data.n()).map(|i| mr_summand(data.y()[i], data.a()[i], h1[i], h0[i], q0[i], q1[i])),
    );
    Ok(EstimateResult {
        solves: bridges.named_solves(),
        ..EstimateResult::bare(Estimand::Psi10, Method::PMr, point)
    })
}

/// Dispatch on the method tag (proxy mediation estimators only).
pub fn psi_estimate(
    data: &MediationDataset,
    bridges: &FittedBridges,
    method: Method,
) -> Result<EstimateResult> {
    match method {
        Method::POr => psi_por(data, bridges),
        Method::PHybrid => psi_phybrid(data, bridges),
        Method::PIpw => psi_pipw(data, bridges),
        Method::PMr => psi_pmr(data, bridges),
        other => Err(Error::Invalid(format!(
            "{} is not a mediation-functional estimator",
            other.label()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Per-arm doubly robust mean (the benchmark subtrahend)
// ---------------------------------------------------------------------------

/// Fitted nuisances of the per-arm doubly robust estimator of `E[Y(a)]`:
/// an outcome bridge on `(1, W, X)` instrumented by `(1, Z, X)` and an
/// inverse-propensity bridge `1 + exp(-(1, Z, X)'t)` instrumented by
/// `(1, W, X)`.
#[derive(Debug, Clone)]
pub struct PdrFit {
    pub arm: u8,
    pub features: FeatureMap,
    pub outcome: SolveReport,
    pub treatment: SolveReport,
}

impl PdrFit {
    pub fn max_condition(&self) -> f64 {
        self.outcome.condition.max(self.treatment.condition)
    }
}

pub(crate) struct PdrDesigns {
    pub f: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

pub(crate) fn pdr_designs(data: &MediationDataset, features: &FeatureMap) -> PdrDesigns {
    let n = data.n();
    PdrDesigns {
        f: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.w()),
                Block::Features(data.x(), features),
            ],
        ),
        c: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.z()),
                Block::Features(data.x(), features),
            ],
        ),
        u: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.z()),
                Block::Features(data.x(), features),
            ],
        ),
    }
}

/// Fit both per-arm bridges for `E[Y(arm)]`.
pub fn fit_pdr(data: &MediationDataset, arm: u8, features: &FeatureMap) -> Result<PdrFit> {
    if arm > 1 {
        return Err(Error::Invalid(format!("arm must be 0 or 1, got {arm}")));
    }
    require_valid(data)?;
    let designs = pdr_designs(data, features);
    let sel: Vec<f64> = data
        .a()
        .iter()
        .map(|&a| f64::from(a == f64::from(arm)))
        .collect();
    let outcome = weighted_linear_fit(&sel, &designs.c, &designs.f, data.y(), "pdr-outcome")?;
    let system = InverseArmSystem {
        sel: &sel,
        u: &designs.u,
        d: &designs.f,
        clamp_events: std::cell::Cell::new(0),
    };
    let init = vec![0.0; system.dim()];
    let mut treatment =
        newton_solve_multistart(&system, &init, NEWTON_TOL, NEWTON_MAX_ITER, "pdr-treatment")?;
    treatment.clamp_events = system.clamp_events.get();
    Ok(PdrFit {
        arm,
        features: features.clone(),
        outcome,
        treatment,
    })
}

/// Evaluate `mean[ I(A=arm) qt (Y - ho) + ho ]` at the fitted bridges.
pub fn delta_pdr_point(data: &MediationDataset, fit: &PdrFit) -> f64 {
    let designs = pdr_designs(data, &fit.features);
    let ho = &designs.f * DVector::from_column_slice(&fit.outcome.params);
    let lin = &designs.u * DVector::from_column_slice(&fit.treatment.params);
    mean((0..data.n()).map(|i| {
        let sel = f64::from(data.a()[i] == f64::from(fit.arm));
        let qt = 1.0 + exp_clamped(-lin[i]).0;
        sel * qt * (data.y()[i] - ho[i]) + ho[i]
    }))
}

/// Doubly robust estimator of `E[Y(arm)]` with identity covariate features.
pub fn delta_pdr(data: &MediationDataset, arm: u8) -> Result<EstimateResult> {
    let features = FeatureMap::identity(data.p_x());
    let fit = fit_pdr(data, arm, &features)?;
    let point = delta_pdr_point(data, &fit);
    let estimand = if arm == 0 {
        Estimand::Ey0
    } else {
        Estimand::Ey1
    };
    Ok(EstimateResult {
        solves: vec![
            NamedSolve {
                name: format!("pdr-outcome-{arm}"),
                report: fit.outcome.clone(),
            },
            NamedSolve {
                name: format!("pdr-treatment-{arm}"),
                report: fit.treatment.clone(),
            },
        ],
        ..EstimateResult::bare(estimand, Method::PDr, point)
    })
}

/// Natural direct/indirect contrasts for one method:
/// `NDE(0) = psi - delta(0)`, `NIE(1) = delta(1) - psi`, and the total
/// effect. The total is accumulated as `NDE(0) + NIE(1)` so the telescoping
/// identity holds bit-exactly.
pub fn effects(
    data: &MediationDataset,
    bridges: &FittedBridges,
    pdr0: &PdrFit,
    pdr1: &PdrFit,
    method: Method,
) -> Result<Vec<EstimateResult>> {
    let psi = psi_estimate(data, bridges, method)?.point;
    let delta0 = delta_pdr_point(data, pdr0);
    let delta1 = delta_pdr_point(data, pdr1);
    let nde0 = psi - delta0;
    let nie1 = delta1 - psi;
    let total = nde0 + nie1;
    Ok(vec![
        EstimateResult::bare(Estimand::Nde0, method, nde0),
        EstimateResult::bare(Estimand::Nie1, method, nie1),
        EstimateResult::bare(Estimand::Total, method, total),
    ])
}

// ---------------------------------------------------------------------------
// OLS benchmark
// ---------------------------------------------------------------------------

/// Which variables the OLS benchmark adjusts for, besides `(1, A, M, X)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OlsAdjust {
    pub include_z: bool,
    pub include_w: bool,
}

/// Least squares of `Y` on `(1, A, M, X, Z, W)` (optionally omitting `Z`);
/// the treatment coefficient with its classical standard error.
pub fn naive_ols(data: &MediationDataset, include_z: bool) -> Result<EstimateResult> {
    naive_ols_with(
        data,
        OlsAdjust {
            include_z,
            include_w: true,
        },
    )
}

/// OLS benchmark with an explicit adjustment set.
pub fn naive_ols_with(data: &MediationDataset, adjust: OlsAdjust) -> Result<EstimateResult> {
    require_valid(data)?;
    let n = data.n();
    let mut blocks = vec![
        Block::Intercept,
        Block::Scalar(data.a()),
        Block::Scalar(data.m()),
        Block::Mat(data.x()),
    ];
    if adjust.include_z {
        blocks.push(Block::Mat(data.z()));
    }
    if adjust.include_w {
        blocks.push(Block::Mat(data.w()));
    }
    let design = assemble(n, &blocks);
    let p = design.ncols();
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * DVector::from_column_slice(data.y());
    let (coef, _) = solve_conditioned(&xtx, &xty, "ols design")?;
    let fitted = &design * &coef;
    let rss: f64 = data
        .y()
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| (y - f).powi(2))
        .sum();
    let sigma2 = rss / (n - p) as f64;
    let (xtx_inv, _) = crate::linalg::invert_conditioned(&xtx, "ols design")?;
    let se = (sigma2 * xtx_inv[(1, 1)]).sqrt();
    Ok(EstimateResult::bare(Estimand::Nde0, Method::Ols, coef[1]).with_normal_ci(se))
}

// ---------------------------------------------------------------------------
// Randomized-trial estimators
// ---------------------------------------------------------------------------

/// How `f(A=0|X)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propensity {
    /// Known constant randomization probability `P(A=0)`.
    Known(f64),
    /// The empirical mean of `1 - A` (declared marginal randomization).
    EmpiricalMarginal,
    /// Logistic regression of `A` on `(1, X)`.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RctVariant {
    Or,
    Ipw,
    Mr,
}

impl RctVariant {
    fn method(self) -> Method {
        match self {
            RctVariant::Or => Method::RctOr,
            RctVariant::Ipw => Method::RctIpw,
            RctVariant::Mr => Method::RctMr,
        }
    }
}

/// Least-squares projection of `h1(W, M, X; beta1)` on `(1, W, X)` among
/// control rows; the fitted function estimates
/// `eta0(W, X) = Int h1(W, m, X) dF(m | W, A=0, X)`.
pub fn fit_eta0(data: &MediationDataset, bridges: &FittedBridges) -> Result<SolveReport> {
    let beta1 = &bridges.require("beta1")?.params;
    let designs = bridge_designs(data, &bridges.spec);
    let h1 = &designs.f1 * DVector::from_column_slice(beta1);
    let reg = assemble(
        data.n(),
        &[Block::Intercept, Block::Mat(data.w()), Block::Mat(data.x())],
    );
    let controls: Vec<f64> = data.a().iter().map(|a| 1.0 - a).collect();
    if data.n_control() == 0 {
        return Err(Error::Validation("control arm absent".into()));
    }
    let h1_slice: Vec<f64> = h1.iter().copied().collect();
    // Least squares == exactly identified moment system with the regressors
    // as their own instruments.
    weighted_linear_fit(&controls, &reg, &reg, &h1_slice, "eta0")
}

/// Evaluate the fitted `eta0` on every row.
pub fn eta0_values(data: &MediationDataset, eta0: &SolveReport) -> Vec<f64> {
    let reg = assemble(
        data.n(),
        &[Block::Intercept, Block::Mat(data.w()), Block::Mat(data.x())],
    );
    let v = &reg * DVector::from_column_slice(&eta0.params);
    v.iter().copied().collect()
}

/// Fit the trial treatment bridge `q1(Z, M, X) = exp(g'(1, Z, M, X))` from
/// `sum_i {A_i q1_i - (1 - A_i)} (1, W_i, M_i, X_i)' = 0`.
pub fn fit_rct_q1(data: &MediationDataset, features: &FeatureMap) -> Result<SolveReport> {
    require_valid(data)?;
    let n = data.n();
    let u = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.z()),
            Block::Scalar(data.m()),
            Block::Features(data.x(), features),
        ],
    );
    let d = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.w()),
            Block::Scalar(data.m()),
            Block::Features(data.x(), features),
        ],
    );
    let ones = vec![1.0; n];
    let system = ProductArmSystem {
        a: data.a(),
        base: &ones,
        offset: &ones,
        u: &u,
        d: &d,
        clamp_events: std::cell::Cell::new(0),
    };
    let init = vec![0.0; system.dim()];
    let mut report =
        newton_solve_multistart(&system, &init, NEWTON_TOL, NEWTON_MAX_ITER, "rct-q1")?;
    report.clamp_events = system.clamp_events.get();
    Ok(report)
}

/// Evaluate the trial `q1` on every row.
pub fn rct_q1_values(data: &MediationDataset, features: &FeatureMap, params: &[f64]) -> Vec<f64> {
    let u = assemble(
        data.n(),
        &[
            Block::Intercept,
            Block::Mat(data.z()),
            Block::Scalar(data.m()),
            Block::Features(data.x(), features),
        ],
    );
    let lin = &u * DVector::from_column_slice(params);
    lin.iter().map(|&t| exp_clamped(t).0).collect()
}

/// Per-row `f(A=0|X)` under the chosen propensity model, guarded to the
/// admissible band `(0.01, 0.99)`.
pub fn propensity_f0(data: &MediationDataset, model: Propensity) -> Result<Vec<f64>> {
    let n = data.n();
    let values = match model {
        Propensity::Known(p) => vec![p; n],
        Propensity::EmpiricalMarginal => {
            let p = data.a().iter().map(|a| 1.0 - a).sum::<f64>() / n as f64;
            vec![p; n]
        }
        Propensity::Logistic => {
            let design = assemble(n, &[Block::Intercept, Block::Mat(data.x())]);
            let coef = logistic_irls(&design, data.a())?;
            let lin = &design * &coef;
            lin.iter().map(|&t| 1.0 - expit(t)).collect()
        }
    };
    for (row, &f0) in values.iter().enumerate() {
        if !(0.01..=0.99).contains(&f0) {
            return Err(Error::PropensityOutOfRange { row, value: f0 });
        }
    }
    Ok(values)
}

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn logistic_irls(design: &DMatrix<f64>, target: &[f64]) -> Result<DVector<f64>> {
    let n = design.nrows();
    let p = design.ncols();
    let mut coef = DVector::zeros(p);
    for _ in 0..50 {
        let lin = design * &coef;
        let mut hess = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        for i in 0..n {
            let mu = expit(lin[i]);
            let wt = (mu * (1.0 - mu)).max(1e-10);
            for j in 0..p {
                score[j] += design[(i, j)] * (target[i] - mu);
                for k in 0..p {
                    hess[(j, k)] += design[(i, j)] * design[(i, k)] * wt;
                }
            }
        }
        let (step, _) = solve_conditioned(&hess, &score, "logistic propensity")?;
        coef += &step;
        if step.amax() < 1e-10 {
            return Ok(coef);
        }
    }
    Err(Error::NoConvergence {
        context: "logistic propensity".into(),
        iterations: 50,
        residual: f64::NAN,
    })
}

/// Inputs for the randomized-trial estimators of the mediation functional.
pub struct RctInputs<'a> {
    pub bridges: &'a FittedBridges,
    pub eta0: &'a SolveReport,
    /// Trial treatment bridge; required by the IPW and MR variants.
    pub q1: Option<&'a SolveReport>,
    pub propensity: Propensity,
}

/// Randomized-trial estimators of `E[Y{1, M(0)}]`:
/// OR averages `eta0`; IPW averages `A q1 Y / f(A=0|X)`; MR combines both
/// through the trial influence function.
pub fn psi_rct(
    data: &MediationDataset,
    inputs: &RctInputs<'_>,
    variant: RctVariant,
) -> Result<EstimateResult> {
    let eta0 = eta0_values(data, inputs.eta0);
    let point = match variant {
        RctVariant::Or => mean(eta0.iter().copied()),
        RctVariant::Ipw => {
            let q1r = inputs.q1.ok_or(Error::UnconvergedBridge("rct-q1"))?;
            let q1 = rct_q1_values(data, &inputs.bridges.spec.q1_features, &q1r.params);
            let f0 = propensity_f0(data, inputs.propensity)?;
            mean((0..data.n()).map(|i| data.a()[i] * q1[i] * data.y()[i] / f0[i]))
        }
        RctVariant::Mr => {
            let beta1 = &inputs.bridges.require("beta1")?.params;
            let designs = bridge_designs(data, &inputs.bridges.spec);
            let h1 = &designs.f1 * DVector::from_column_slice(beta1);
            let q1r = inputs.q1.ok_or(Error::UnconvergedBridge("rct-q1"))?;
            let q1 = rct_q1_values(data, &inputs.bridges.spec.q1_features, &q1r.params);
            let f0 = propensity_f0(data, inputs.propensity)?;
            mean((0..data.n()).map(|i| {
                let a = data.a()[i];
                a * q1[i] * (data.y()[i] - h1[i]) / f0[i]
                    + (1.0 - a) * (h1[i] - eta0[i]) / f0[i]
                    + eta0[i]
            }))
        }
    };
    Ok(EstimateResult::bare(
        Estimand::Psi10,
        variant.method(),
        point,
    ))
}
