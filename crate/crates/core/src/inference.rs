//! Standard errors: stacked-moment sandwich variance and the nonparametric
//! bootstrap.
//!
//! The sandwich stacks every moment block the estimator rests on (bridge
//! systems, the per-arm doubly robust nuisances when the target is a direct
//! effect, and the estimator's own centering equation), differentiates the
//! stack analytically, and reads the target variance off
//! `bread^-1 meat bread^-T / n`. Cross-block derivative terms are included:
//! `beta0` responds to `beta1`, `gamma1` to `gamma0`, and the centering row
//! to every upstream parameter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::exp_clamped;
use crate::data::MediationDataset;
use crate::error::{Error, Result};
use crate::estimate::{
    delta_pdr_point, evaluate_bridges, pdr_designs, psi_estimate, FittedBridges, Method, PdrFit,
};
use crate::linalg::invert_conditioned;
use crate::par::map_indexed;
use crate::rng::{space, stream_id, stream_rng};

/// Point estimate with a standard error and a 95% interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Inference {
    pub point: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

/// Stacked moment system evaluated at the fitted parameters.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    /// Jacobian of the averaged stacked moments (square, total parameter
    /// dimension).
    pub bread: DMatrix<f64>,
    /// Average outer product of the per-row stacked moments.
    pub meat: DMatrix<f64>,
    pub n: usize,
}

impl StackedSystem {
    /// `bread^-1 meat bread^-T / n`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let (inv, _) = invert_conditioned(&self.bread, "sandwich bread")?;
        Ok(&inv * &self.meat * inv.transpose() / self.n as f64)
    }

    /// Standard error of the last stacked parameter (the estimator target).
    pub fn se_last(&self) -> Result<f64> {
        let cov = self.covariance()?;
        let d = cov.nrows();
        let v = cov[(d - 1, d - 1)];
        Ok(v.max(0.0).sqrt())
    }

    /// Largest asymmetry of the covariance relative to its scale; the
    /// sandwich form is symmetric up to inversion error.
    pub fn symmetry_defect(&self) -> Result<f64> {
        let cov = self.covariance()?;
        let scale = cov.abs().max().max(f64::MIN_POSITIVE);
        Ok((&cov - cov.transpose()).abs().max() / scale)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TargetKind {
    Psi,
    Theta,
}

fn blocks_for(method: Method) -> Result<(bool, bool, bool, bool)> {
    // (beta1, beta0, gamma0, gamma1)
    Ok(match method {
        Method::POr => (true, true, false, false),
        Method::PHybrid => (true, false, true, false),
        Method::PIpw => (false, false, true, true),
        Method::PMr => (true, true, true, true),
        other => {
            return Err(Error::Invalid(format!(
                "no stacked sandwich for method {}",
                other.label()
            )))
        }
    })
}

fn build_stacked(
    data: &MediationDataset,
    bridges: &FittedBridges,
    pdr0: Option<&PdrFit>,
    method: Method,
    target: TargetKind,
    point: f64,
) -> Result<StackedSystem> {
    let n = data.n();
    let (use_b1, use_b0, use_g0, use_g1) = blocks_for(method)?;
    if target == TargetKind::Theta && pdr0.is_none() {
        return Err(Error::Invalid(
            "direct-effect sandwich requires the per-arm doubly robust fit".into(),
        ));
    }

    let eval = evaluate_bridges(data, bridges);
    let d = &eval.designs;
    let h1 = eval.h1.as_deref();
    let h0 = eval.h0.as_deref();
    let q0 = eval.q0.as_deref();
    let s0 = eval.q0_slope.as_deref();
    let e1 = eval.e1.as_deref();
    let q1 = eval.q1.as_deref();

    for (flag, name) in [
        (use_b1, "beta1"),
        (use_b0, "beta0"),
        (use_g0, "gamma0"),
        (use_g1, "gamma1"),
    ] {
        if flag {
            bridges.require(name)?;
        }
    }

    // Per-arm nuisance values when the target is theta.
    let pdr = pdr0.map(|fit| {
        let designs = pdr_designs(data, &fit.features);
        let ho = &designs.f * DVector::from_column_slice(&fit.outcome.params);
        let lin = &designs.u * DVector::from_column_slice(&fit.treatment.params);
        let qt: Vec<f64> = lin.iter().map(|&t| 1.0 + exp_clamped(-t).0).collect();
        let st: Vec<f64> = lin.iter().map(|&t| -exp_clamped(-t).0).collect();
        let sel: Vec<f64> = data
            .a()
            .iter()
            .map(|&a| f64::from(a == f64::from(fit.arm)))
            .collect();
        (designs, ho, qt, st, sel)
    });

    // Block offsets.
    let d1 = d.f1.ncols();
    let d0c = d.f0.ncols();
    let g0d = d.u0.ncols();
    let g1d = d.u1.ncols();
    let mut dim = 0usize;
    let mut off = [0usize; 7];
    let mut push = |slot: usize, width: usize, dim: &mut usize| {
        off[slot] = *dim;
        *dim += width;
    };
    if use_b1 {
        push(0, d1, &mut dim);
    }
    if use_b0 {
        push(1, d0c, &mut dim);
    }
    if use_g0 {
        push(2, g0d, &mut dim);
    }
    if use_g1 {
        push(3, g1d, &mut dim);
    }
    if let Some((designs, ..)) = &pdr {
        if target == TargetKind::Theta {
            push(4, designs.f.ncols(), &mut dim);
            push(5, designs.u.ncols(), &mut dim);
        }
    }
    push(6, 1, &mut dim);
    let t_off = off[6];

    let mut bread = DMatrix::zeros(dim, dim);
    let mut meat = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);

    let y = data.y();
    let a = data.a();
    for i in 0..n {
        g.fill(0.0);
        let ai = a[i];
        let ctrl = 1.0 - ai;

        if use_b1 {
            let eps = y[i] - h1.unwrap()[i];
            for j in 0..d1 {
                g[off[0] + j] = ai * eps * d.c1[(i, j)];
                for k in 0..d1 {
                    bread[(off[0] + j, off[0] + k)] -= ai * d.c1[(i, j)] * d.f1[(i, k)];
                }
            }
        }
        if use_b0 {
            let eps = h1.unwrap()[i] - h0.unwrap()[i];
            for j in 0..d0c {
                g[off[1] + j] = ctrl * eps * d.c0[(i, j)];
                for k in 0..d1 {
                    bread[(off[1] + j, off[0] + k)] += ctrl * d.c0[(i, j)] * d.f1[(i, k)];
                }
                for k in 0..d0c {
                    bread[(off[1] + j, off[1] + k)] -= ctrl * d.c0[(i, j)] * d.f0[(i, k)];
                }
            }
        }
        if use_g0 {
            let q0i = q0.unwrap()[i];
            let s0i = s0.unwrap()[i];
            for j in 0..g0d {
                g[off[2] + j] = (ctrl * q0i - 1.0) * d.d0[(i, j)];
                for k in 0..g0d {
                    bread[(off[2] + j, off[2] + k)] += ctrl * s0i * d.d0[(i, j)] * d.u0[(i, k)];
                }
            }
        }
        if use_g1 {
            let q0i = q0.unwrap()[i];
            let s0i = s0.unwrap()[i];
            let e1i = e1.unwrap()[i];
            let q1i = q1.unwrap()[i];
            for j in 0..g1d {
                g[off[3] + j] = (ai * q1i - ctrl * q0i) * d.d1[(i, j)];
                for k in 0..g0d {
                    bread[(off[3] + j, off[2] + k)] +=
                        (ai * e1i - ctrl) * s0i * d.d1[(i, j)] * d.u0[(i, k)];
                }
                for k in 0..g1d {
                    bread[(off[3] + j, off[3] + k)] += ai * q1i * d.d1[(i, j)] * d.u1[(i, k)];
                }
            }
        }

        // Estimator summand and the centering row.
        let mut center = -point;
        match method {
            Method::POr => {
                center += h0.unwrap()[i];
                for k in 0..d0c {
                    bread[(t_off, off[1] + k)] += d.f0[(i, k)];
                }
            }
            Method::PHybrid => {
                let (h1i, q0i, s0i) = (h1.unwrap()[i], q0.unwrap()[i], s0.unwrap()[i]);
                center += ctrl * q0i * h1i;
                for k in 0..d1 {
                    bread[(t_off, off[0] + k)] += ctrl * q0i * d.f1[(i, k)];
                }
                for k in 0..g0d {
                    bread[(t_off, off[2] + k)] += ctrl * h1i * s0i * d.u0[(i, k)];
                }
            }
            Method::PIpw => {
                let (q1i, e1i, s0i) = (q1.unwrap()[i], e1.unwrap()[i], s0.unwrap()[i]);
                center += ai * q1i * y[i];
                for k in 0..g0d {
                    bread[(t_off, off[2] + k)] += ai * y[i] * e1i * s0i * d.u0[(i, k)];
                }
                for k in 0..g1d {
                    bread[(t_off, off[3] + k)] += ai * y[i] * q1i * d.u1[(i, k)];
                }
            }
            Method::PMr => {
                let (h1i, h0i) = (h1.unwrap()[i], h0.unwrap()[i]);
                let (q0i, s0i) = (q0.unwrap()[i], s0.unwrap()[i]);
                let (e1i, q1i) = (e1.unwrap()[i], q1.unwrap()[i]);
                center += ai * q1i * (y[i] - h1i) + ctrl * q0i * (h1i - h0i) + h0i;
                for k in 0..d1 {
                    bread[(t_off, off[0] + k)] += (ctrl * q0i - ai * q1i) * d.f1[(i, k)];
                }
                for k in 0..d0c {
                    bread[(t_off, off[1] + k)] += (1.0 - ctrl * q0i) * d.f0[(i, k)];
                }
                for k in 0..g0d {
                    bread[(t_off, off[2] + k)] +=
                        (ai * (y[i] - h1i) * e1i + ctrl * (h1i - h0i)) * s0i * d.u0[(i, k)];
                }
                for k in 0..g1d {
                    bread[(t_off, off[3] + k)] += ai * (y[i] - h1i) * q1i * d.u1[(i, k)];
                }
            }
            _ => unreachable!("blocks_for rejects other methods"),
        }

        if target == TargetKind::Theta {
            let (designs, ho, qt, st, sel) = pdr.as_ref().expect("checked above");
            let (pe, pt) = (designs.f.ncols(), designs.u.ncols());
            let seli = sel[i];
            let eps = y[i] - ho[i];
            for j in 0..pe {
                g[off[4] + j] = seli * eps * designs.c[(i, j)];
                for k in 0..pe {
                    bread[(off[4] + j, off[4] + k)] -= seli * designs.c[(i, j)] * designs.f[(i, k)];
                }
            }
            for j in 0..pt {
                g[off[5] + j] = (seli * qt[i] - 1.0) * designs.f[(i, j)];
                for k in 0..pt {
                    bread[(off[5] + j, off[5] + k)] +=
                        seli * st[i] * designs.f[(i, j)] * designs.u[(i, k)];
                }
            }
            // Subtract the per-arm summand from the centering equation.
            center -= seli * qt[i] * eps + ho[i];
            for k in 0..pe {
                bread[(t_off, off[4] + k)] -= (1.0 - seli * qt[i]) * designs.f[(i, k)];
            }
            for k in 0..pt {
                bread[(t_off, off[5] + k)] -= seli * eps * st[i] * designs.u[(i, k)];
            }
        }

        g[t_off] = center;
        bread[(t_off, t_off)] -= 1.0;

        // meat += g g'
        for j in 0..dim {
            let gj = g[j];
            if gj == 0.0 {
                continue;
            }
            for k in 0..dim {
                meat[(j, k)] += gj * g[k];
            }
        }
    }

    bread /= n as f64;
    meat /= n as f64;
    Ok(StackedSystem { bread, meat, n })
}

/// Sandwich inference for the mediation functional `psi` under the given
/// method.
pub fn sandwich_psi(
    data: &MediationDataset,
    bridges: &FittedBridges,
    method: Method,
) -> Result<Inference> {
    let point = psi_estimate(data, bridges, method)?.point;
    let system = build_stacked(data, bridges, None, method, TargetKind::Psi, point)?;
    let se = system.se_last()?;
    Ok(Inference {
        point,
        se,
        ci: (point - 1.96 * se, point + 1.96 * se),
    })
}

/// Sandwich inference for the natural direct effect estimate
/// `theta = psi_hat - delta_hat(0)`, stacking the per-arm doubly robust
/// nuisance blocks alongside the mediation bridges.
pub fn sandwich_theta(
    data: &MediationDataset,
    bridges: &FittedBridges,
    pdr0: &PdrFit,
    method: Method,
) -> Result<Inference> {
    let psi = psi_estimate(data, bridges, method)?.point;
    let delta = delta_pdr_point(data, pdr0);
    let point = psi - delta;
    let system = build_stacked(data, bridges, Some(pdr0), method, TargetKind::Theta, point)?;
    let se = system.se_last()?;
    Ok(Inference {
        point,
        se,
        ci: (point - 1.96 * se, point + 1.96 * se),
    })
}

/// Expose the stacked system itself (diagnostics, symmetry checks).
pub fn stacked_psi_system(
    data: &MediationDataset,
    bridges: &FittedBridges,
    method: Method,
) -> Result<StackedSystem> {
    let point = psi_estimate(data, bridges, method)?.point;
    build_stacked(data, bridges, None, method, TargetKind::Psi, point)
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Normal,
    Percentile,
}

/// Nonparametric bootstrap configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub interval: IntervalKind,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            interval: IntervalKind::Normal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub se: f64,
    pub ci: (f64, f64),
    /// Replicates that produced an estimate.
    pub used: usize,
    /// Replicates dropped because some solve failed.
    pub failures: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Resample rows with replacement `replicates` times, rerun the full
/// pipeline per replicate, and summarize the replicate spread.
///
/// Replicate `r` draws its indices from a stream keyed by
/// `(seed, replicate)`, so results are identical for any worker count.
/// Replicates whose pipeline errors are dropped and counted; more than 20%
/// failures aborts with [`Error::BootstrapUnstable`].
pub fn bootstrap_se<F>(
    data: &MediationDataset,
    point: f64,
    cfg: &BootstrapConfig,
    pipeline: F,
) -> Result<BootstrapOutcome>
where
    F: Fn(&MediationDataset) -> Result<f64> + Sync,
{
    if cfg.replicates == 0 {
        return Err(Error::Invalid(
            "bootstrap needs at least 1 replicate".into(),
        ));
    }
    let n = data.n();
    let estimates: Vec<Option<f64>> = map_indexed(cfg.replicates, |r| {
        let mut rng = stream_rng(cfg.seed, stream_id(space::BOOTSTRAP, r as u64));
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let resampled = data.take_rows(&idx).ok()?;
        pipeline(&resampled).ok()
    });

    let kept: Vec<f64> = estimates.iter().copied().flatten().collect();
    let failures = cfg.replicates - kept.len();
    if (failures as f64) > 0.2 * cfg.replicates as f64 {
        return Err(Error::BootstrapUnstable {
            failed: failures,
            total: cfg.replicates,
        });
    }
    if kept.is_empty() {
        return Err(Error::BootstrapUnstable {
            failed: failures,
            total: cfg.replicates,
        });
    }

    if kept.len() == 1 {
        // Degenerate single-replicate edge: zero spread, interval pinned at
        // the lone replicate.
        return Ok(BootstrapOutcome {
            se: 0.0,
            ci: (kept[0], kept[0]),
            used: 1,
            failures,
        });
    }

    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (kept.len() - 1) as f64;
    let se = var.sqrt();
    let ci = match cfg.interval {
        IntervalKind::Normal => (point - 1.96 * se, point + 1.96 * se),
        IntervalKind::Percentile => {
            let mut sorted = kept.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite estimates"));
            (quantile(&sorted, 0.025), quantile(&sorted, 0.975))
        }
    };
    Ok(BootstrapOutcome {
        se,
        ci,
        used: kept.len(),
        failures,
    })
}
