//! Moment-equation solvers for the bridge parameters.
//!
//! The four systems are exactly identified (one instrument per parameter) and
//! solved sequentially: the two outcome-side systems are linear in their
//! coefficients and reduce to a single conditioned solve; the two
//! treatment-side systems are solved by damped Newton iteration.
//!
//! Default instruments are `(1, Z, M, X)` for `beta1`, `(1, Z, X)` for
//! `beta0`, `(1, W, X)` for `gamma0` and `(1, W, M, X)` for `gamma1`, with
//! covariates passed through the same feature map as the corresponding
//! bridge. Custom instrument matrices are accepted as long as they keep the
//! system square.

// Row loops index matrices and per-row value vectors side by side.
#![allow(clippy::needless_range_loop)]

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bridge::{exp_clamped, BridgeSpec};
use crate::data::{FeatureMap, MediationDataset};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, solve_conditioned, sup_norm};

/// Default convergence tolerance on the sup-norm of the averaged moments.
pub const NEWTON_TOL: f64 = 1e-9;
/// Default iteration cap for Newton solves.
pub const NEWTON_MAX_ITER: usize = 100;
/// Residual tolerance treated as "solved" for the linear systems.
pub const LINEAR_TOL: f64 = 1e-8;
/// Maximum number of step halvings per Newton iteration.
const MAX_HALVINGS: usize = 30;

/// Outcome of one moment-system solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    /// Parameter vector at exit.
    pub params: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm of the averaged moment vector at `params`.
    pub residual_norm: f64,
    pub converged: bool,
    /// Condition estimate of the Jacobian (cross-moment matrix) at exit.
    pub condition: f64,
    /// Number of exponent-clamp events observed during the solve.
    pub clamp_events: u64,
}

/// A square system of averaged moment conditions.
pub trait MomentSystem {
    fn dim(&self) -> usize;
    fn residual(&self, params: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64>;
}

/// Damped Newton iteration: full steps are halved (up to 30 times) until the
/// residual 2-norm decreases; convergence is declared when the sup-norm of
/// the residual drops to `tol`.
pub fn newton_solve(
    system: &dyn MomentSystem,
    init: &[f64],
    tol: f64,
    max_iter: usize,
    context: &str,
) -> Result<SolveReport> {
    if init.len() != system.dim() {
        return Err(Error::Dimension(format!(
            "{context}: init length {} != system dimension {}",
            init.len(),
            system.dim()
        )));
    }
    let mut x = DVector::from_column_slice(init);
    let mut r = system.residual(&x);
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid(format!(
            "{context}: residual not finite at initial point"
        )));
    }
    let mut condition = f64::NAN;
    for iteration in 0..max_iter {
        if sup_norm(&r) <= tol {
            let j = system.jacobian(&x);
            condition = condition_number(&j);
            return Ok(SolveReport {
                params: x.iter().copied().collect(),
                iterations: iteration,
                residual_norm: sup_norm(&r),
                converged: true,
                condition,
                clamp_events: 0,
            });
        }
        let j = system.jacobian(&x);
        let (step, cond) = solve_conditioned(&j, &r, context)?;
        condition = cond;
        let base_norm = r.norm();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &x - scale * &step;
            let r_new = system.residual(&candidate);
            if r_new.iter().all(|v| v.is_finite()) && r_new.norm() < base_norm {
                x = candidate;
                r = r_new;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // Halved Newton stalls when the Jacobian is close to singular
            // (weak proxies). Retry with ridge-damped steps before giving
            // up: solve (J'J + lambda diag(J'J)) step = J' r over a ladder
            // of damping strengths and take the first residual decrease.
            let jtj = j.transpose() * &j;
            let jtr = j.transpose() * &r;
            let mut lambda = 1e-4;
            while lambda <= 1e4 {
                let mut damped = jtj.clone();
                for k in 0..damped.nrows() {
                    damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
                }
                if let Ok((step, _)) = solve_conditioned(&damped, &jtr, context) {
                    let candidate = &x - &step;
                    let r_new = system.residual(&candidate);
                    if r_new.iter().all(|v| v.is_finite()) && r_new.norm() < base_norm {
                        x = candidate;
                        r = r_new;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 100.0;
            }
        }
        if !accepted {
            return Err(Error::StepUnderflow {
                context: context.to_string(),
                residual: sup_norm(&r),
            });
        }
    }
    if sup_norm(&r) <= tol {
        return Ok(SolveReport {
            params: x.iter().copied().collect(),
            iterations: max_iter,
            residual_norm: sup_norm(&r),
            converged: true,
            condition,
            clamp_events: 0,
        });
    }
    Err(Error::NoConvergence {
        context: context.to_string(),
        iterations: max_iter,
        residual: sup_norm(&r),
    })
}

// ---------------------------------------------------------------------------
// Design-matrix assembly
// ---------------------------------------------------------------------------

/// One block of columns in a design or instrument matrix.
pub(crate) enum Block<'a> {
    Intercept,
    Scalar(&'a [f64]),
    Mat(&'a crate::data::ColMat),
    Features(&'a crate::data::ColMat, &'a FeatureMap),
}

pub(crate) fn assemble(n: usize, blocks: &[Block<'_>]) -> DMatrix<f64> {
    let d: usize = blocks
        .iter()
        .map(|b| match b {
            Block::Intercept => 1,
            Block::Scalar(_) => 1,
            Block::Mat(m) => m.ncols(),
            Block::Features(m, _) => m.ncols(),
        })
        .sum();
    let mut out = DMatrix::zeros(n, d);
    let mut j = 0;
    for block in blocks {
        match block {
            Block::Intercept => {
                out.column_mut(j).fill(1.0);
                j += 1;
            }
            Block::Scalar(v) => {
                for i in 0..n {
                    out[(i, j)] = v[i];
                }
                j += 1;
            }
            Block::Mat(m) => {
                for c in 0..m.ncols() {
                    let col = m.col(c);
                    for i in 0..n {
                        out[(i, j)] = col[i];
                    }
                    j += 1;
                }
            }
            Block::Features(m, map) => {
                for c in 0..m.ncols() {
                    let col = m.col(c);
                    for i in 0..n {
                        out[(i, j)] = map.apply_value(c, col[i]);
                    }
                    j += 1;
                }
            }
        }
    }
    out
}

/// The standard regressor/instrument matrices for one dataset and bridge
/// specification.
pub(crate) struct BridgeDesigns {
    pub f1: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub f0: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub u0: DMatrix<f64>,
    pub d0: DMatrix<f64>,
    pub u1: DMatrix<f64>,
    pub d1: DMatrix<f64>,
}

pub(crate) fn bridge_designs(data: &MediationDataset, spec: &BridgeSpec) -> BridgeDesigns {
    let n = data.n();
    BridgeDesigns {
        f1: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.w()),
                Block::Scalar(data.m()),
                Block::Features(data.x(), &spec.h1_features),
            ],
        ),
        c1: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.z()),
                Block::Scalar(data.m()),
                Block::Features(data.x(), &spec.h1_features),
            ],
        ),
        f0: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.w()),
                Block::Features(data.x(), &spec.h0_features),
            ],
        ),
        c0: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.z()),
                Block::Features(data.x(), &spec.h0_features),
            ],
        ),
        u0: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.z()),
                Block::Features(data.x(), &spec.q0_features),
            ],
        ),
        d0: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.w()),
                Block::Features(data.x(), &spec.q0_features),
            ],
        ),
        u1: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.z()),
                Block::Scalar(data.m()),
                Block::Features(data.x(), &spec.q1_features),
            ],
        ),
        d1: assemble(
            n,
            &[
                Block::Intercept,
                Block::Mat(data.w()),
                Block::Scalar(data.m()),
                Block::Features(data.x(), &spec.q1_features),
            ],
        ),
    }
}

// ---------------------------------------------------------------------------
// Linear (outcome-bridge) fits
// ---------------------------------------------------------------------------

/// Solve the exactly identified linear system
/// `(1/n) sum_i sel_i instr_i (target_i - regr_i' b) = 0`.
pub(crate) fn weighted_linear_fit(
    sel: &[f64],
    instruments: &DMatrix<f64>,
    regressors: &DMatrix<f64>,
    target: &[f64],
    context: &str,
) -> Result<SolveReport> {
    let n = sel.len();
    let d = regressors.ncols();
    if instruments.ncols() != d {
        return Err(Error::Dimension(format!(
            "{context}: {} instruments for {} parameters; system must stay square",
            instruments.ncols(),
            d
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut g = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for i in 0..n {
        let s = sel[i];
        if s == 0.0 {
            continue;
        }
        for j in 0..d {
            let cij = instruments[(i, j)] * s;
            rhs[j] += cij * target[i];
            for k in 0..d {
                g[(j, k)] += cij * regressors[(i, k)];
            }
        }
    }
    g *= inv_n;
    rhs *= inv_n;
    let (params, condition) = solve_conditioned(&g, &rhs, context)?;
    let residual = &rhs - &g * &params;
    let residual_norm = sup_norm(&residual);
    Ok(SolveReport {
        params: params.iter().copied().collect(),
        iterations: 1,
        residual_norm,
        converged: residual_norm <= LINEAR_TOL,
        condition,
        clamp_events: 0,
    })
}

fn require_square_defaults(data: &MediationDataset, context: &str) -> Result<()> {
    if data.p_z() != data.p_w() {
        return Err(Error::Dimension(format!(
            "{context}: default instruments need p_z = p_w (got p_z = {}, p_w = {}); \
             supply custom instruments for unbalanced proxy dimensions",
            data.p_z(),
            data.p_w()
        )));
    }
    Ok(())
}

/// Fit `beta1` from `sum_i A_i {Y_i - h1(W_i, M_i, X_i; b)} c1_i = 0`.
pub fn fit_beta1(data: &MediationDataset, spec: &BridgeSpec) -> Result<SolveReport> {
    require_square_defaults(data, "beta1")?;
    let designs = bridge_designs(data, spec);
    fit_beta1_with_instruments(data, spec, &designs.c1)
}

pub fn fit_beta1_with_instruments(
    data: &MediationDataset,
    spec: &BridgeSpec,
    instruments: &DMatrix<f64>,
) -> Result<SolveReport> {
    let f1 = assemble(
        data.n(),
        &[
            Block::Intercept,
            Block::Mat(data.w()),
            Block::Scalar(data.m()),
            Block::Features(data.x(), &spec.h1_features),
        ],
    );
    weighted_linear_fit(data.a(), instruments, &f1, data.y(), "beta1")
}

/// Fit `beta0` from `sum_i (1-A_i) {h1_i - h0(W_i, X_i; b)} c0_i = 0`, with
/// `h1` evaluated at the already-fitted `beta1`.
pub fn fit_beta0(data: &MediationDataset, spec: &BridgeSpec, beta1: &[f64]) -> Result<SolveReport> {
    require_square_defaults(data, "beta0")?;
    let designs = bridge_designs(data, spec);
    fit_beta0_with_instruments(data, spec, beta1, &designs.c0)
}

pub fn fit_beta0_with_instruments(
    data: &MediationDataset,
    spec: &BridgeSpec,
    beta1: &[f64],
    instruments: &DMatrix<f64>,
) -> Result<SolveReport> {
    let n = data.n();
    let f1 = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.w()),
            Block::Scalar(data.m()),
            Block::Features(data.x(), &spec.h1_features),
        ],
    );
    let beta1_v = DVector::from_column_slice(beta1);
    if f1.ncols() != beta1.len() {
        return Err(Error::Dimension(format!(
            "beta0: beta1 has length {}, expected {}",
            beta1.len(),
            f1.ncols()
        )));
    }
    let h1 = &f1 * &beta1_v;
    let f0 = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.w()),
            Block::Features(data.x(), &spec.h0_features),
        ],
    );
    let controls: Vec<f64> = data.a().iter().map(|a| 1.0 - a).collect();
    let h1_slice: Vec<f64> = h1.iter().copied().collect();
    weighted_linear_fit(&controls, instruments, &f0, &h1_slice, "beta0")
}

// ---------------------------------------------------------------------------
// Exponential (treatment-bridge) systems
// ---------------------------------------------------------------------------

/// Moments `(1/n) sum_i {sel_i q(u_i'g) - 1} d_i` with `q(t) = 1 + exp(-t)`.
/// Fits `gamma0` (sel = 1-A) and the per-arm inverse-propensity bridges.
pub(crate) struct InverseArmSystem<'a> {
    pub sel: &'a [f64],
    pub u: &'a DMatrix<f64>,
    pub d: &'a DMatrix<f64>,
    pub clamp_events: Cell<u64>,
}

impl InverseArmSystem<'_> {
    fn q_values(&self, params: &DVector<f64>) -> Vec<f64> {
        let lin = self.u * params;
        let mut clamps = 0;
        let vals = lin
            .iter()
            .map(|&t| {
                let (e, clamped) = exp_clamped(-t);
                clamps += u64::from(clamped);
                1.0 + e
            })
            .collect();
        self.clamp_events.set(self.clamp_events.get() + clamps);
        vals
    }
}

impl MomentSystem for InverseArmSystem<'_> {
    fn dim(&self) -> usize {
        self.u.ncols()
    }

    fn residual(&self, params: &DVector<f64>) -> DVector<f64> {
        let n = self.sel.len();
        let q = self.q_values(params);
        let mut r = DVector::zeros(self.d.ncols());
        for i in 0..n {
            let e = self.sel[i] * q[i] - 1.0;
            for j in 0..self.d.ncols() {
                r[j] += e * self.d[(i, j)];
            }
        }
        r / n as f64
    }

    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64> {
        let n = self.sel.len();
        let lin = self.u * params;
        let mut jac = DMatrix::zeros(self.d.ncols(), self.u.ncols());
        for i in 0..n {
            if self.sel[i] == 0.0 {
                continue;
            }
            let (e, _) = exp_clamped(-lin[i]);
            let w = -self.sel[i] * e;
            for j in 0..self.d.ncols() {
                let dj = self.d[(i, j)] * w;
                for k in 0..self.u.ncols() {
                    jac[(j, k)] += dj * self.u[(i, k)];
                }
            }
        }
        jac / n as f64
    }
}

/// Moments `(1/n) sum_i {A_i base_i exp(u_i'g) - (1-A_i) q0_i} d_i`, the
/// `gamma1` system with `base_i = q0(Z_i, X_i; gamma0)` held fixed.
pub(crate) struct ProductArmSystem<'a> {
    pub a: &'a [f64],
    pub base: &'a [f64],
    pub offset: &'a [f64],
    pub u: &'a DMatrix<f64>,
    pub d: &'a DMatrix<f64>,
    pub clamp_events: Cell<u64>,
}

impl ProductArmSystem<'_> {
    fn q1_values(&self, params: &DVector<f64>) -> Vec<f64> {
        let lin = self.u * params;
        let mut clamps = 0;
        let vals = lin
            .iter()
            .zip(self.base)
            .map(|(&t, &b)| {
                let (e, clamped) = exp_clamped(t);
                clamps += u64::from(clamped);
                b * e
            })
            .collect();
        self.clamp_events.set(self.clamp_events.get() + clamps);
        vals
    }
}

impl MomentSystem for ProductArmSystem<'_> {
    fn dim(&self) -> usize {
        self.u.ncols()
    }

    fn residual(&self, params: &DVector<f64>) -> DVector<f64> {
        let n = self.a.len();
        let q1 = self.q1_values(params);
        let mut r = DVector::zeros(self.d.ncols());
        for i in 0..n {
            let e = self.a[i] * q1[i] - (1.0 - self.a[i]) * self.offset[i];
            for j in 0..self.d.ncols() {
                r[j] += e * self.d[(i, j)];
            }
        }
        r / n as f64
    }

    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64> {
        let n = self.a.len();
        let q1 = self.q1_values(params);
        let mut jac = DMatrix::zeros(self.d.ncols(), self.u.ncols());
        for i in 0..n {
            if self.a[i] == 0.0 {
                continue;
            }
            let w = self.a[i] * q1[i];
            for j in 0..self.d.ncols() {
                let dj = self.d[(i, j)] * w;
                for k in 0..self.u.ncols() {
                    jac[(j, k)] += dj * self.u[(i, k)];
                }
            }
        }
        jac / n as f64
    }
}

/// Deterministic fallback starting points tried in order when the Newton
/// solve from the primary initialization fails: a fixed lattice of small
/// coefficient patterns, nearest the origin first. Weak-proxy draws often
/// have roots far from zero that the default start cannot reach.
pub(crate) fn fallback_starts(dim: usize) -> Vec<Vec<f64>> {
    let mut starts = Vec::new();
    for v in [0.75, -0.75, 1.5, -1.5] {
        let mut s = vec![0.0; dim];
        s[0] = v;
        starts.push(s);
        starts.push(vec![v; dim]);
    }
    for j in 1..dim.min(3) {
        for v in [0.75, -0.75] {
            let mut s = vec![0.0; dim];
            s[j] = v;
            starts.push(s);
        }
    }
    starts
}

pub(crate) fn newton_solve_multistart(
    system: &dyn MomentSystem,
    init: &[f64],
    tol: f64,
    max_iter: usize,
    context: &str,
) -> Result<SolveReport> {
    let first = newton_solve(system, init, tol, max_iter, context);
    match first {
        Ok(report) => Ok(report),
        Err(primary) => {
            for start in fallback_starts(system.dim()) {
                if let Ok(report) = newton_solve(system, &start, tol, max_iter.min(50), context) {
                    return Ok(report);
                }
            }
            Err(primary)
        }
    }
}

/// Fit `gamma0` from `sum_i {(1-A_i) q0(Z_i, X_i; g) - 1} d0_i = 0` by
/// damped Newton (zeros initialization unless overridden).
pub fn fit_gamma0(
    data: &MediationDataset,
    spec: &BridgeSpec,
    init: Option<&[f64]>,
) -> Result<SolveReport> {
    require_square_defaults(data, "gamma0")?;
    let n = data.n();
    let u0 = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.z()),
            Block::Features(data.x(), &spec.q0_features),
        ],
    );
    let d0 = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.w()),
            Block::Features(data.x(), &spec.q0_features),
        ],
    );
    fit_gamma0_with_instruments(data, &u0, &d0, init)
}

pub fn fit_gamma0_with_instruments(
    data: &MediationDataset,
    regressors: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
    init: Option<&[f64]>,
) -> Result<SolveReport> {
    let controls: Vec<f64> = data.a().iter().map(|a| 1.0 - a).collect();
    let system = InverseArmSystem {
        sel: &controls,
        u: regressors,
        d: instruments,
        clamp_events: Cell::new(0),
    };
    let zeros = vec![0.0; system.dim()];
    let init = init.unwrap_or(&zeros);
    let mut report = newton_solve_multistart(&system, init, NEWTON_TOL, NEWTON_MAX_ITER, "gamma0")?;
    report.clamp_events = system.clamp_events.get();
    Ok(report)
}

/// Fit `gamma1` from
/// `sum_i {A_i q1(Z_i, M_i, X_i; g) - (1-A_i) q0_i} d1_i = 0`, with `q0`
/// evaluated at the already-fitted `gamma0`.
pub fn fit_gamma1(
    data: &MediationDataset,
    spec: &BridgeSpec,
    gamma0: &[f64],
    init: Option<&[f64]>,
) -> Result<SolveReport> {
    require_square_defaults(data, "gamma1")?;
    let n = data.n();
    let u1 = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.z()),
            Block::Scalar(data.m()),
            Block::Features(data.x(), &spec.q1_features),
        ],
    );
    let d1 = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.w()),
            Block::Scalar(data.m()),
            Block::Features(data.x(), &spec.q1_features),
        ],
    );
    let u0 = assemble(
        n,
        &[
            Block::Intercept,
            Block::Mat(data.z()),
            Block::Features(data.x(), &spec.q0_features),
        ],
    );
    let gamma0_v = DVector::from_column_slice(gamma0);
    if u0.ncols() != gamma0.len() {
        return Err(Error::Dimension(format!(
            "gamma1: gamma0 has length {}, expected {}",
            gamma0.len(),
            u0.ncols()
        )));
    }
    let lin0 = &u0 * &gamma0_v;
    let q0: Vec<f64> = lin0.iter().map(|&t| 1.0 + exp_clamped(-t).0).collect();
    fit_gamma1_with_instruments(data, &q0, &u1, &d1, init)
}

pub fn fit_gamma1_with_instruments(
    data: &MediationDataset,
    q0_values: &[f64],
    regressors: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
    init: Option<&[f64]>,
) -> Result<SolveReport> {
    let system = ProductArmSystem {
        a: data.a(),
        base: q0_values,
        offset: q0_values,
        u: regressors,
        d: instruments,
        clamp_events: Cell::new(0),
    };
    let zeros = vec![0.0; system.dim()];
    let init = init.unwrap_or(&zeros);
    let mut report = newton_solve_multistart(&system, init, NEWTON_TOL, NEWTON_MAX_ITER, "gamma1")?;
    report.clamp_events = system.clamp_events.get();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColMat;

    struct Scalar<F: Fn(f64) -> f64, G: Fn(f64) -> f64> {
        f: F,
        df: G,
    }

    impl<F: Fn(f64) -> f64, G: Fn(f64) -> f64> MomentSystem for Scalar<F, G> {
        fn dim(&self) -> usize {
            1
        }
        fn residual(&self, p: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![(self.f)(p[0])])
        }
        fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_vec(1, 1, vec![(self.df)(p[0])])
        }
    }

    #[test]
    fn newton_solves_affine_system_in_one_step() {
        let sys = Scalar {
            f: |p| p - 3.0,
            df: |_| 1.0,
        };
        let report = newton_solve(&sys, &[0.0], 1e-9, 100, "affine").unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
        assert!((report.params[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn newton_solves_exponential_system() {
        let sys = Scalar {
            f: |p: f64| p.exp() - 2.0,
            df: |p: f64| p.exp(),
        };
        let report = newton_solve(&sys, &[0.0], 1e-9, 20, "exp").unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 20);
        assert!((report.params[0] - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn newton_reports_nonconvergence() {
        // Gradient points the wrong way and the residual never decreases.
        let sys = Scalar {
            f: |p: f64| 1.0 + p * p,
            df: |p: f64| 2.0 * p.max(0.1),
        };
        let err = newton_solve(&sys, &[1.0], 1e-9, 5, "bad").unwrap_err();
        match err {
            Error::StepUnderflow { .. } | Error::NoConvergence { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    /// Balanced coin, intercept-only q0 system: the constant-instrument
    /// moment forces mean q0 over controls = 2, i.e. the intercept is 0.
    #[test]
    fn gamma0_intercept_fixed_point() {
        let n = 40;
        let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let sel: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let u = DMatrix::from_element(n, 1, 1.0);
        let d = u.clone();
        let system = InverseArmSystem {
            sel: &sel,
            u: &u,
            d: &d,
            clamp_events: Cell::new(0),
        };
        let report = newton_solve(&system, &[0.7], 1e-12, 100, "gamma0-intercept").unwrap();
        assert!(report.converged);
        assert!(report.params[0].abs() < 1e-10, "{:?}", report.params);
    }

    /// With q0 fixed at 2 and a balanced coin, the intercept-only q1 system
    /// forces mean q1 over the treated arm to equal 2, i.e. exponent 0.
    #[test]
    fn gamma1_intercept_fixed_point() {
        let n = 40;
        let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let base = vec![2.0; n];
        let u = DMatrix::from_element(n, 1, 1.0);
        let d = u.clone();
        let system = ProductArmSystem {
            a: &a,
            base: &base,
            offset: &base,
            u: &u,
            d: &d,
            clamp_events: Cell::new(0),
        };
        let report = newton_solve(&system, &[0.4], 1e-12, 100, "gamma1-intercept").unwrap();
        assert!(report.converged);
        assert!(report.params[0].abs() < 1e-10);
    }

    fn exact_linear_dataset() -> MediationDataset {
        // Y constructed exactly as a linear bridge in (1, W, M, X); the
        // beta1 solve must recover the coefficients to solver precision.
        let n = 60;
        let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let z: Vec<f64> = (0..n)
            .map(|i| (i as f64 * 0.61).cos() + 0.2 * w[i])
            .collect();
        let m: Vec<f64> = (0..n).map(|i| (i as f64 * 0.17).sin() * 1.4).collect();
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let a: Vec<f64> = (0..n).map(|i| ((i * 5 % 3) % 2) as f64).collect();
        let truth = [0.7, -1.3, 0.9, 2.1];
        let y: Vec<f64> = (0..n)
            .map(|i| truth[0] + truth[1] * w[i] + truth[2] * m[i] + truth[3] * x[i])
            .collect();
        MediationDataset::new(
            y,
            a,
            m,
            ColMat::new(vec![x]),
            ColMat::new(vec![z]),
            ColMat::new(vec![w]),
        )
        .unwrap()
    }

    #[test]
    fn beta1_recovers_exact_linear_outcome() {
        let data = exact_linear_dataset();
        let report = fit_beta1(&data, &BridgeSpec::identity(1)).unwrap();
        assert!(report.converged);
        let truth = [0.7, -1.3, 0.9, 2.1];
        for (got, want) in report.params.iter().zip(truth) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        assert!(report.residual_norm < 1e-12);
    }

    #[test]
    fn beta0_recovers_nested_exact_case() {
        // With beta1_m = 0, h1 is itself of the h0 form; beta0 must match.
        let data = exact_linear_dataset();
        let beta1 = [0.7, -1.3, 0.0, 2.1];
        let report = fit_beta0(&data, &BridgeSpec::identity(1), &beta1).unwrap();
        assert!(report.converged);
        let want = [0.7, -1.3, 2.1];
        for (got, want) in report.params.iter().zip(want) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn mismatched_proxy_dimensions_are_rejected() {
        let n = 30;
        let data = MediationDataset::new(
            vec![1.0; n],
            (0..n).map(|i| (i % 2) as f64).collect(),
            vec![0.5; n],
            ColMat::new(vec![vec![0.1; n]]),
            ColMat::new(vec![vec![0.2; n], vec![0.3; n]]),
            ColMat::new(vec![vec![0.4; n]]),
        )
        .unwrap();
        let err = fit_beta1(&data, &BridgeSpec::identity(1)).unwrap_err();
        assert!(err.to_string().contains("p_z = p_w"), "{err}");
    }
}
