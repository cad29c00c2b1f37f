//! Small dense solves with condition diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Hard singularity cutoff for moment-system solves.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Solve `a x = b` for square `a`, returning the solution and the 2-norm
/// condition number of `a`. Errors when the condition estimate exceeds
/// [`SINGULAR_CONDITION`].
pub fn solve_conditioned(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    context: &str,
) -> Result<(DVector<f64>, f64)> {
    debug_assert_eq!(a.nrows(), a.ncols());
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !condition.is_finite() || condition > SINGULAR_CONDITION {
        return Err(Error::Singular {
            context: context.to_string(),
            condition,
        });
    }
    let x = svd.solve(b, 0.0).map_err(|_| Error::Singular {
        context: context.to_string(),
        condition,
    })?;
    Ok((x, condition))
}

/// Condition number (ratio of extreme singular values) of a rectangular matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

/// Invert a square matrix, with the same singularity guard as
/// [`solve_conditioned`].
pub fn invert_conditioned(a: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, f64)> {
    let condition = condition_number(a);
    if !condition.is_finite() || condition > SINGULAR_CONDITION {
        return Err(Error::Singular {
            context: context.to_string(),
            condition,
        });
    }
    let inv = a.clone().try_inverse().ok_or_else(|| Error::Singular {
        context: context.to_string(),
        condition,
    })?;
    Ok((inv, condition))
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}
