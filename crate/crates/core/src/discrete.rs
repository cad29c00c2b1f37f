//! Exact finite-law verification of the proxy identification identities.
//!
//! A [`DiscreteLaw`] is a structural joint distribution over
//! `(U, A, Z, W, M, Y)` with finite supports, factored as
//! `P(u) P(a|u) P(z|u,a) P(w|u) P(m|a,u) P(y|a,m,u,w)` so the proxy
//! conditional independencies hold by construction. On such a law the
//! mediation functional has a brute-force value (the latent g-formula), and
//! each confounding-bridge integral equation reduces to a small linear
//! system per conditioning cell. Solving those systems and pushing the
//! bridges through the three identification formulas must reproduce the
//! brute-force value exactly (to solver precision) whenever the
//! completeness (matrix-rank) conditions hold.

// Index-based loops mirror the summation notation of the identities and run
// over several tables at once.
#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{space, stream_id, stream_rng};

/// Largest support size per variable.
pub const MAX_SUPPORT: usize = 4;

/// Relative singular-value cutoff for rank decisions on identification
/// matrices.
const RANK_TOL: f64 = 1e-9;

/// A structural finite law over `(U, Z, W, A, M, Y)`.
///
/// The outcome support carries numeric values `y_values`; all other
/// variables are categorical indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteLaw {
    /// Numeric support of `Y`.
    pub y_values: Vec<f64>,
    /// `P(U = u)`.
    pub p_u: Vec<f64>,
    /// `P(A = 1 | u)`.
    pub p_a1_u: Vec<f64>,
    /// `P(Z = z | u, a)`, indexed `[u][a][z]`.
    pub p_z_ua: Vec<Vec<Vec<f64>>>,
    /// `P(W = w | u)`, indexed `[u][w]`.
    pub p_w_u: Vec<Vec<f64>>,
    /// `P(M = m | a, u)`, indexed `[a][u][m]`.
    pub p_m_au: Vec<Vec<Vec<f64>>>,
    /// `P(Y = y | a, m, u, w)`, indexed `[a][m][u][w][y]`.
    pub p_y_amuw: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

impl DiscreteLaw {
    pub fn d_u(&self) -> usize {
        self.p_u.len()
    }

    pub fn d_z(&self) -> usize {
        self.p_z_ua[0][0].len()
    }

    pub fn d_w(&self) -> usize {
        self.p_w_u[0].len()
    }

    pub fn d_m(&self) -> usize {
        self.p_m_au[0][0].len()
    }

    pub fn d_y(&self) -> usize {
        self.y_values.len()
    }

    fn p_a(&self, u: usize, a: usize) -> f64 {
        if a == 1 {
            self.p_a1_u[u]
        } else {
            1.0 - self.p_a1_u[u]
        }
    }

    /// Full joint mass `P(u, a, z, w, m, y)`.
    pub fn joint(&self, u: usize, a: usize, z: usize, w: usize, m: usize, y: usize) -> f64 {
        self.p_u[u]
            * self.p_a(u, a)
            * self.p_z_ua[u][a][z]
            * self.p_w_u[u][w]
            * self.p_m_au[a][u][m]
            * self.p_y_amuw[a][m][u][w][y]
    }

    /// Structural validity: every table is a probability distribution and
    /// supports stay within [`MAX_SUPPORT`].
    pub fn validate(&self) -> Result<()> {
        let (du, dz, dw, dm, dy) = (self.d_u(), self.d_z(), self.d_w(), self.d_m(), self.d_y());
        for (label, d) in [("U", du), ("Z", dz), ("W", dw), ("M", dm), ("Y", dy)] {
            if d == 0 || d > MAX_SUPPORT {
                return Err(Error::InvalidLaw(format!(
                    "support of {label} must be 1..={MAX_SUPPORT}, got {d}"
                )));
            }
        }
        let check = |label: &str, dist: &[f64]| -> Result<()> {
            if dist.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::InvalidLaw(format!(
                    "{label}: probability outside [0,1]"
                )));
            }
            let total: f64 = dist.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidLaw(format!("{label}: sums to {total}")));
            }
            Ok(())
        };
        check("P(U)", &self.p_u)?;
        if self.p_a1_u.len() != du {
            return Err(Error::InvalidLaw("P(A|U) length mismatch".into()));
        }
        for (u, &p) in self.p_a1_u.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidLaw(format!("P(A=1|u={u}) = {p}")));
            }
        }
        for u in 0..du {
            for a in 0..2 {
                check(&format!("P(Z|u={u},a={a})"), &self.p_z_ua[u][a])?;
            }
            check(&format!("P(W|u={u})"), &self.p_w_u[u])?;
        }
        for a in 0..2 {
            for u in 0..du {
                check(&format!("P(M|a={a},u={u})"), &self.p_m_au[a][u])?;
            }
        }
        for a in 0..2 {
            for m in 0..dm {
                for u in 0..du {
                    for w in 0..dw {
                        check(
                            &format!("P(Y|a={a},m={m},u={u},w={w})"),
                            &self.p_y_amuw[a][m][u][w],
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    fn e_y(&self, a: usize, m: usize, u: usize, w: usize) -> f64 {
        self.p_y_amuw[a][m][u][w]
            .iter()
            .zip(&self.y_values)
            .map(|(p, y)| p * y)
            .sum()
    }

    /// Observable transition matrix `P(W = w | Z = z, A = a [, M = m])`,
    /// rows indexed by `z`.
    pub fn w_given_z(&self, a: usize, m: Option<usize>) -> DMatrix<f64> {
        let (dz, dw, du) = (self.d_z(), self.d_w(), self.d_u());
        let mut out = DMatrix::zeros(dz, dw);
        for z in 0..dz {
            let mut norm = 0.0;
            for w in 0..dw {
                let mut p = 0.0;
                for u in 0..du {
                    let m_factor = m.map_or(1.0, |m| self.p_m_au[a][u][m]);
                    p += self.p_u[u]
                        * self.p_a(u, a)
                        * self.p_z_ua[u][a][z]
                        * self.p_w_u[u][w]
                        * m_factor;
                }
                out[(z, w)] = p;
                norm += p;
            }
            for w in 0..dw {
                out[(z, w)] /= norm;
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("law serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let law: Self = serde_json::from_str(text).map_err(|e| Error::InvalidLaw(e.to_string()))?;
        law.validate()?;
        Ok(law)
    }
}

// ---------------------------------------------------------------------------
// Random law constructors
// ---------------------------------------------------------------------------

fn rand_prob(rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn rand_dist(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// A distribution over `d` categories concentrated near category
/// `favored mod d`; distinct `favored` values give strongly separated rows,
/// which keeps the identification matrices well conditioned.
fn separated_dist(rng: &mut rand_chacha::ChaCha8Rng, d: usize, favored: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..d)
        .map(|k| {
            let boost = if k == favored % d { 2.5 } else { 0.0 };
            0.15 + boost + rng.random_range(0.0..0.2)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Supports for a randomly generated law.
#[derive(Debug, Clone, Copy)]
pub struct LawDims {
    pub d_u: usize,
    pub d_z: usize,
    pub d_w: usize,
    pub d_m: usize,
    pub d_y: usize,
}

impl LawDims {
    pub fn binary() -> Self {
        Self {
            d_u: 2,
            d_z: 2,
            d_w: 2,
            d_m: 2,
            d_y: 2,
        }
    }
}

/// Draw a structurally valid random law. With `strong_proxies`, the
/// `U -> Z` and `U -> W` channels are separated so the completeness
/// matrices are far from singular.
pub fn random_law(seed: u64, dims: LawDims, strong_proxies: bool) -> DiscreteLaw {
    let mut rng = stream_rng(seed, stream_id(space::LAW, 0));
    let p_u = rand_dist(&mut rng, dims.d_u);
    let p_a1_u: Vec<f64> = (0..dims.d_u)
        .map(|_| rand_prob(&mut rng, 0.25, 0.75))
        .collect();
    let p_z_ua: Vec<Vec<Vec<f64>>> = (0..dims.d_u)
        .map(|u| {
            (0..2)
                .map(|_| {
                    if strong_proxies {
                        separated_dist(&mut rng, dims.d_z, u)
                    } else {
                        rand_dist(&mut rng, dims.d_z)
                    }
                })
                .collect()
        })
        .collect();
    let p_w_u: Vec<Vec<f64>> = (0..dims.d_u)
        .map(|u| {
            if strong_proxies {
                separated_dist(&mut rng, dims.d_w, u)
            } else {
                rand_dist(&mut rng, dims.d_w)
            }
        })
        .collect();
    let p_m_au: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| {
            (0..dims.d_u)
                .map(|_| rand_dist(&mut rng, dims.d_m))
                .collect()
        })
        .collect();
    let p_y_amuw: Vec<Vec<Vec<Vec<Vec<f64>>>>> = (0..2)
        .map(|_| {
            (0..dims.d_m)
                .map(|_| {
                    (0..dims.d_u)
                        .map(|_| {
                            (0..dims.d_w)
                                .map(|_| rand_dist(&mut rng, dims.d_y))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let y_values: Vec<f64> = (0..dims.d_y)
        .map(|k| k as f64 + rng.random_range(-0.4..0.4))
        .collect();
    DiscreteLaw {
        y_values,
        p_u,
        p_a1_u,
        p_z_ua,
        p_w_u,
        p_m_au,
        p_y_amuw,
    }
}

/// A random binary law with strongly `U`-informative proxies.
pub fn random_binary_law(seed: u64) -> DiscreteLaw {
    random_law(seed, LawDims::binary(), true)
}

/// A binary law whose `Z` channel ignores `U`: the textbook completeness
/// failure.
pub fn z_independent_law(seed: u64) -> DiscreteLaw {
    let mut law = random_binary_law(seed);
    for u in 1..law.d_u() {
        law.p_z_ua[u] = law.p_z_ua[0].clone();
    }
    law
}

/// A law with a single-point `U` (no confounding at all).
pub fn degenerate_u_law(seed: u64) -> DiscreteLaw {
    random_law(
        seed,
        LawDims {
            d_u: 1,
            ..LawDims::binary()
        },
        false,
    )
}

// ---------------------------------------------------------------------------
// Brute-force truth
// ---------------------------------------------------------------------------

/// The latent g-formula:
/// `psi = sum_u P(u) sum_m P(m|A=0,u) E[Y | u, A=1, m]`, with the inner
/// expectation marginalizing `W | u`.
pub fn true_psi_brute(law: &DiscreteLaw) -> Result<f64> {
    law.validate()?;
    let mut psi = 0.0;
    for u in 0..law.d_u() {
        for m in 0..law.d_m() {
            let mut ey = 0.0;
            for w in 0..law.d_w() {
                ey += law.p_w_u[u][w] * law.e_y(1, m, u, w);
            }
            psi += law.p_u[u] * law.p_m_au[0][u][m] * ey;
        }
    }
    Ok(psi)
}

/// Inverse-CDF interval partition for a family of conditional distributions
/// sharing one noise variable: breakpoints where any config's step function
/// jumps, plus the selected category per (interval, config).
fn noise_partition(tables: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<usize>>) {
    let mut breaks = vec![0.0, 1.0];
    for t in tables {
        let mut acc = 0.0;
        for p in &t[..t.len() - 1] {
            acc += p;
            breaks.push(acc);
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let mut selections = Vec::with_capacity(breaks.len() - 1);
    for k in 0..breaks.len() - 1 {
        let mid = 0.5 * (breaks[k] + breaks[k + 1]);
        let row = tables
            .iter()
            .map(|t| {
                let mut acc = 0.0;
                for (v, p) in t.iter().enumerate() {
                    acc += p;
                    if mid < acc {
                        return v;
                    }
                }
                t.len() - 1
            })
            .collect();
        selections.push(row);
    }
    (breaks, selections)
}

/// A second, independent enumeration of `E[Y{1, M(0)}]`: the law is recast
/// as a structural model with one uniform noise per variable (shared across
/// counterfactual arms), and the counterfactual mean is summed exactly over
/// the product partition of the noise space.
pub fn true_psi_counterfactual_enumeration(law: &DiscreteLaw) -> Result<f64> {
    law.validate()?;
    let (du, dw, dm) = (law.d_u(), law.d_w(), law.d_m());

    let (u_breaks, u_sel) = noise_partition(std::slice::from_ref(&law.p_u));
    let (w_breaks, w_sel) = noise_partition(&law.p_w_u);
    // M(0): configs indexed by u.
    let m_tables: Vec<Vec<f64>> = (0..du).map(|u| law.p_m_au[0][u].clone()).collect();
    let (m_breaks, m_sel) = noise_partition(&m_tables);
    // Y(1, m): configs indexed by (m, u, w).
    let mut y_tables = Vec::with_capacity(dm * du * dw);
    for m in 0..dm {
        for u in 0..du {
            for w in 0..dw {
                y_tables.push(law.p_y_amuw[1][m][u][w].clone());
            }
        }
    }
    let (y_breaks, y_sel) = noise_partition(&y_tables);

    let mut psi = 0.0;
    for (iu, su) in u_sel.iter().enumerate() {
        let wu = u_breaks[iu + 1] - u_breaks[iu];
        let u = su[0];
        for (iw, sw) in w_sel.iter().enumerate() {
            let ww = w_breaks[iw + 1] - w_breaks[iw];
            let w = sw[u];
            for (im, sm) in m_sel.iter().enumerate() {
                let wm = m_breaks[im + 1] - m_breaks[im];
                let m0 = sm[u];
                let config = (m0 * du + u) * dw + w;
                for (iy, sy) in y_sel.iter().enumerate() {
                    let wy = y_breaks[iy + 1] - y_breaks[iy];
                    psi += wu * ww * wm * wy * law.y_values[sy[config]];
                }
            }
        }
    }
    Ok(psi)
}

/// Standard (proxy-free) mediation formula on the observed law:
/// `sum_m E[Y | A=1, m] P(m | A=0)`. Coincides with the truth only when
/// `U` is degenerate.
pub fn psi_standard_mediation(law: &DiscreteLaw) -> f64 {
    let du = law.d_u();
    let mut psi = 0.0;
    for m in 0..law.d_m() {
        let mut p_m0 = 0.0;
        let mut p_a0 = 0.0;
        let mut ey_num = 0.0;
        let mut ey_den = 0.0;
        for u in 0..du {
            let p0 = law.p_u[u] * law.p_a(u, 0);
            p_m0 += p0 * law.p_m_au[0][u][m];
            p_a0 += p0;
            let p1m = law.p_u[u] * law.p_a(u, 1) * law.p_m_au[1][u][m];
            for w in 0..law.d_w() {
                ey_num += p1m * law.p_w_u[u][w] * law.e_y(1, m, u, w);
            }
            ey_den += p1m;
        }
        psi += (ey_num / ey_den) * (p_m0 / p_a0);
    }
    psi
}

// ---------------------------------------------------------------------------
// Bridge solves and the three identification formulas
// ---------------------------------------------------------------------------

/// Bridge tables and the four values of the mediation functional computed
/// from one law.
#[derive(Debug, Clone, Serialize)]
pub struct IdentificationResult {
    pub psi_true: f64,
    /// Mean of `h0(W)`.
    pub psi_h: f64,
    /// Mean of `I(A=0) q0(Z) h1(W, M)`.
    pub psi_hybrid: f64,
    /// Mean of `I(A=1) q1(Z, M) Y`.
    pub psi_q: f64,
    /// `h1[m][w]`.
    pub h1: Vec<Vec<f64>>,
    /// `h0[w]`.
    pub h0: Vec<f64>,
    /// `q0[z]`.
    pub q0: Vec<f64>,
    /// `q1[m][z]`.
    pub q1: Vec<Vec<f64>>,
    /// Conditioning cells whose identification matrix was rank-deficient
    /// (consistent systems solved in the lenient mode).
    pub non_unique_cells: Vec<String>,
}

fn solve_cell(
    t: &DMatrix<f64>,
    rhs: &DVector<f64>,
    strict: bool,
    cell: &str,
    deficient_cells: &mut Vec<String>,
) -> Result<DVector<f64>> {
    let svd = t.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * smax.max(f64::MIN_POSITIVE))
        .count();
    let full = rank == t.nrows().min(t.ncols()) && t.nrows() >= t.ncols();
    if !full {
        if strict {
            return Err(Error::CompletenessViolated { cell: cell.into() });
        }
        deficient_cells.push(cell.to_string());
    }
    let solution = svd
        .solve(rhs, RANK_TOL * smax)
        .map_err(|_| Error::CompletenessViolated { cell: cell.into() })?;
    let residual = t * &solution - rhs;
    let scale = rhs.amax().max(1.0);
    if residual.amax() > 1e-9 * scale {
        return Err(Error::CompletenessViolated { cell: cell.into() });
    }
    Ok(solution)
}

fn solve_bridges(law: &DiscreteLaw, strict: bool) -> Result<IdentificationResult> {
    law.validate()?;
    let (du, dz, dw, dm, dy) = (law.d_u(), law.d_z(), law.d_w(), law.d_m(), law.d_y());
    let mut non_unique = Vec::new();

    // h1 per mediator cell: sum_w h1(w, m) P(w | z, A=1, m) = E[Y | z, A=1, m].
    let mut h1 = vec![vec![0.0; dw]; dm];
    for m in 0..dm {
        let mut t = DMatrix::zeros(dz, dw);
        let mut rhs = DVector::zeros(dz);
        for z in 0..dz {
            let mut p_cell = 0.0;
            let mut ey = 0.0;
            for u in 0..du {
                let base = law.p_u[u] * law.p_a(u, 1) * law.p_z_ua[u][1][z] * law.p_m_au[1][u][m];
                p_cell += base;
                for w in 0..dw {
                    t[(z, w)] += base * law.p_w_u[u][w];
                    ey += base * law.p_w_u[u][w] * law.e_y(1, m, u, w);
                }
            }
            for w in 0..dw {
                t[(z, w)] /= p_cell;
            }
            rhs[z] = ey / p_cell;
        }
        let sol = solve_cell(&t, &rhs, strict, &format!("A=1, M={m}"), &mut non_unique)?;
        h1[m] = sol.iter().copied().collect();
    }

    // h0: sum_w h0(w) P(w | z, A=0) = E[h1(W, M) | z, A=0].
    let mut t0 = DMatrix::zeros(dz, dw);
    let mut rhs0 = DVector::zeros(dz);
    for z in 0..dz {
        let mut p_cell = 0.0;
        let mut eh1 = 0.0;
        for u in 0..du {
            let base = law.p_u[u] * law.p_a(u, 0) * law.p_z_ua[u][0][z];
            p_cell += base;
            for w in 0..dw {
                t0[(z, w)] += base * law.p_w_u[u][w];
                for m in 0..dm {
                    eh1 += base * law.p_w_u[u][w] * law.p_m_au[0][u][m] * h1[m][w];
                }
            }
        }
        for w in 0..dw {
            t0[(z, w)] /= p_cell;
        }
        rhs0[z] = eh1 / p_cell;
    }
    let h0: Vec<f64> = solve_cell(&t0, &rhs0, strict, "A=0", &mut non_unique)?
        .iter()
        .copied()
        .collect();

    // q0: sum_z q0(z) P(z | w, A=0) = 1 / P(A=0 | w).
    let mut tq = DMatrix::zeros(dw, dz);
    let mut rhsq = DVector::zeros(dw);
    for w in 0..dw {
        let mut p_w0 = 0.0;
        let mut p_w = 0.0;
        for u in 0..du {
            let pw = law.p_u[u] * law.p_w_u[u][w];
            p_w += pw;
            let base = pw * law.p_a(u, 0);
            p_w0 += base;
            for z in 0..dz {
                tq[(w, z)] += base * law.p_z_ua[u][0][z];
            }
        }
        for z in 0..dz {
            tq[(w, z)] /= p_w0;
        }
        rhsq[w] = p_w / p_w0;
    }
    let q0: Vec<f64> = solve_cell(&tq, &rhsq, strict, "q0: A=0", &mut non_unique)?
        .iter()
        .copied()
        .collect();

    // q1 per mediator cell:
    // sum_z q1(z, m) P(z | w, A=1, m)
    //   = E[q0(Z) | w, A=0, m] P(A=0 | w, m) / P(A=1 | w, m).
    let mut q1 = vec![vec![0.0; dz]; dm];
    for m in 0..dm {
        let mut t = DMatrix::zeros(dw, dz);
        let mut rhs = DVector::zeros(dw);
        for w in 0..dw {
            let mut p_w1m = 0.0;
            let mut eq0 = 0.0;
            for u in 0..du {
                let pw = law.p_u[u] * law.p_w_u[u][w];
                let base1 = pw * law.p_a(u, 1) * law.p_m_au[1][u][m];
                let base0 = pw * law.p_a(u, 0) * law.p_m_au[0][u][m];
                p_w1m += base1;
                for z in 0..dz {
                    t[(w, z)] += base1 * law.p_z_ua[u][1][z];
                    eq0 += base0 * law.p_z_ua[u][0][z] * q0[z];
                }
            }
            for z in 0..dz {
                t[(w, z)] /= p_w1m;
            }
            // E[q0|w,0,m] * P(0|w,m)/P(1|w,m) collapses to eq0 / p_w1m.
            rhs[w] = eq0 / p_w1m;
        }
        let sol = solve_cell(
            &t,
            &rhs,
            strict,
            &format!("q1: A=1, M={m}"),
            &mut non_unique,
        )?;
        q1[m] = sol.iter().copied().collect();
    }

    // The three identification formulas on the observed law.
    let mut psi_h = 0.0;
    let mut psi_hybrid = 0.0;
    let mut psi_q = 0.0;
    for u in 0..du {
        for w in 0..dw {
            psi_h += law.p_u[u] * law.p_w_u[u][w] * h0[w];
        }
        for z in 0..dz {
            for w in 0..dw {
                for m in 0..dm {
                    let base0 = law.p_u[u]
                        * law.p_a(u, 0)
                        * law.p_z_ua[u][0][z]
                        * law.p_w_u[u][w]
                        * law.p_m_au[0][u][m];
                    psi_hybrid += base0 * q0[z] * h1[m][w];
                    let base1 = law.p_u[u]
                        * law.p_a(u, 1)
                        * law.p_z_ua[u][1][z]
                        * law.p_w_u[u][w]
                        * law.p_m_au[1][u][m];
                    for y in 0..dy {
                        psi_q += base1 * law.p_y_amuw[1][m][u][w][y] * q1[m][z] * law.y_values[y];
                    }
                }
            }
        }
    }

    Ok(IdentificationResult {
        psi_true: true_psi_brute(law)?,
        psi_h,
        psi_hybrid,
        psi_q,
        h1,
        h0,
        q0,
        q1,
        non_unique_cells: non_unique,
    })
}

/// Solve all four bridge systems and evaluate the three identification
/// formulas. Any rank-deficient identification matrix is an error naming
/// the offending conditioning cell.
pub fn solve_bridges_discrete(law: &DiscreteLaw) -> Result<IdentificationResult> {
    solve_bridges(law, true)
}

/// As [`solve_bridges_discrete`], but rank-deficient-yet-consistent systems
/// are solved in minimum-norm form and recorded in `non_unique_cells`
/// instead of erroring. Inconsistent systems still fail.
pub fn solve_bridges_discrete_lenient(law: &DiscreteLaw) -> Result<IdentificationResult> {
    solve_bridges(law, false)
}

// ---------------------------------------------------------------------------
// Completeness diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CellRank {
    pub cell: String,
    pub rank: usize,
    pub required: usize,
    pub condition: f64,
    pub full: bool,
}

/// Rank report for the observable completeness conditions: the `W | Z`
/// transition matrices within `(A=1, M=m)` cells and the `(A=0)` cell,
/// plus the order condition `min(d_z, d_w) >= d_u`.
#[derive(Debug, Clone, Serialize)]
pub struct CompletenessReport {
    pub d_u: usize,
    pub d_z: usize,
    pub d_w: usize,
    pub order_ok: bool,
    pub cells: Vec<CellRank>,
}

impl CompletenessReport {
    pub fn pass(&self) -> bool {
        self.order_ok && self.cells.iter().all(|c| c.full)
    }
}

pub fn completeness_check(law: &DiscreteLaw) -> Result<CompletenessReport> {
    law.validate()?;
    let required = law.d_z().min(law.d_w());
    let mut cells = Vec::new();
    let mut grade = |label: String, t: DMatrix<f64>| {
        let svd = t.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > RANK_TOL * smax.max(f64::MIN_POSITIVE))
            .count();
        cells.push(CellRank {
            cell: label,
            rank,
            required,
            condition: if smin > 0.0 {
                smax / smin
            } else {
                f64::INFINITY
            },
            full: rank >= required,
        });
    };
    for m in 0..law.d_m() {
        grade(format!("A=1, M={m}"), law.w_given_z(1, Some(m)));
    }
    grade("A=0".to_string(), law.w_given_z(0, None));
    Ok(CompletenessReport {
        d_u: law.d_u(),
        d_z: law.d_z(),
        d_w: law.d_w(),
        order_ok: law.d_z().min(law.d_w()) >= law.d_u(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_psi_with_outcome_independent_of_treatment_path() {
        // Y | a, m, u, w depends on nothing: psi = E[Y].
        let mut law = random_binary_law(100);
        let dist = vec![0.3, 0.7];
        for a in 0..2 {
            for m in 0..2 {
                for u in 0..2 {
                    for w in 0..2 {
                        law.p_y_amuw[a][m][u][w] = dist.clone();
                    }
                }
            }
        }
        let ey: f64 = dist.iter().zip(&law.y_values).map(|(p, y)| p * y).sum();
        let psi = true_psi_brute(&law).unwrap();
        assert!((psi - ey).abs() < 1e-14);
    }

    #[test]
    fn brute_force_psi_with_mediator_independent_of_treatment_and_confounder() {
        // M | a, u constant distribution: psi = sum_{u,m} E[Y|u,1,m] P(m) P(u).
        let mut law = random_binary_law(101);
        let dist = vec![0.4, 0.6];
        for a in 0..2 {
            for u in 0..2 {
                law.p_m_au[a][u] = dist.clone();
            }
        }
        let mut want = 0.0;
        for u in 0..2 {
            for m in 0..2 {
                let mut ey = 0.0;
                for w in 0..2 {
                    ey += law.p_w_u[u][w] * law.e_y(1, m, u, w);
                }
                want += law.p_u[u] * dist[m] * ey;
            }
        }
        let got = true_psi_brute(&law).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn counterfactual_enumeration_matches_g_formula() {
        let law = random_binary_law(3);
        let a = true_psi_brute(&law).unwrap();
        let b = true_psi_counterfactual_enumeration(&law).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn identification_formulas_match_brute_force_on_strong_binary_law() {
        let law = random_binary_law(5);
        let result = solve_bridges_discrete(&law).unwrap();
        assert!(result.non_unique_cells.is_empty());
        for (label, psi) in [
            ("h", result.psi_h),
            ("hybrid", result.psi_hybrid),
            ("q", result.psi_q),
        ] {
            assert!(
                (psi - result.psi_true).abs() < 1e-10,
                "{label}: {psi} vs {}",
                result.psi_true
            );
        }
    }

    #[test]
    fn bridge_tables_satisfy_their_defining_equations() {
        let law = random_binary_law(8);
        let r = solve_bridges_discrete(&law).unwrap();
        for m in 0..law.d_m() {
            let t = law.w_given_z(1, Some(m));
            for z in 0..law.d_z() {
                let lhs: f64 = (0..law.d_w()).map(|w| t[(z, w)] * r.h1[m][w]).sum();
                // Recompute E[Y | z, A=1, m] independently.
                let mut p = 0.0;
                let mut ey = 0.0;
                for u in 0..law.d_u() {
                    let base =
                        law.p_u[u] * law.p_a(u, 1) * law.p_z_ua[u][1][z] * law.p_m_au[1][u][m];
                    p += base;
                    for w in 0..law.d_w() {
                        ey += base * law.p_w_u[u][w] * law.e_y(1, m, u, w);
                    }
                }
                assert!((lhs - ey / p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_independent_law_raises_completeness_error() {
        let law = z_independent_law(7);
        match solve_bridges_discrete(&law) {
            Err(Error::CompletenessViolated { cell }) => {
                assert!(!cell.is_empty());
            }
            other => panic!("expected completeness violation, got {other:?}"),
        }
        let report = completeness_check(&law).unwrap();
        assert!(!report.pass());
        assert!(report.cells.iter().any(|c| c.rank < c.required));
    }

    #[test]
    fn degenerate_u_matches_standard_mediation_formula() {
        let law = degenerate_u_law(9);
        let result = solve_bridges_discrete_lenient(&law).unwrap();
        assert!(!result.non_unique_cells.is_empty());
        let standard = psi_standard_mediation(&law);
        for psi in [result.psi_h, result.psi_hybrid, result.psi_q] {
            assert!((psi - standard).abs() < 1e-10, "{psi} vs {standard}");
        }
        assert!((result.psi_true - standard).abs() < 1e-12);
        // The flat function h1(w, m) = E[Y | A=1, m] is itself a solution.
        for m in 0..law.d_m() {
            let mut ey = 0.0;
            for w in 0..law.d_w() {
                ey += law.p_w_u[0][w] * law.e_y(1, m, 0, w);
            }
            let t = law.w_given_z(1, Some(m));
            for z in 0..law.d_z() {
                let lhs: f64 = (0..law.d_w()).map(|w| t[(z, w)] * ey).sum();
                assert!((lhs - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_deficient_but_consistent_solutions_share_psi() {
        // U binary but Z, W ternary: identification matrices have rank 2 < 3,
        // systems stay consistent, and every solution must produce the same
        // mediation functional.
        let dims = LawDims {
            d_u: 2,
            d_z: 3,
            d_w: 3,
            d_m: 2,
            d_y: 2,
        };
        let law = random_law(21, dims, true);
        let base = solve_bridges_discrete_lenient(&law).unwrap();
        assert!(!base.non_unique_cells.is_empty());
        assert!((base.psi_h - base.psi_true).abs() < 1e-9);
        assert!((base.psi_hybrid - base.psi_true).abs() < 1e-9);
        assert!((base.psi_q - base.psi_true).abs() < 1e-9);

        // Perturb h0 along the null space of its system; mean h0 must not
        // move.
        let t0 = law.w_given_z(0, None);
        let svd = t0.clone().svd(false, true);
        let v_t = svd.v_t.unwrap();
        let null_dir = v_t.row(v_t.nrows() - 1).transpose();
        assert!((&t0 * &null_dir).amax() < 1e-10, "not a null direction");
        let mut psi_h_perturbed = 0.0;
        for u in 0..law.d_u() {
            for w in 0..law.d_w() {
                psi_h_perturbed += law.p_u[u] * law.p_w_u[u][w] * (base.h0[w] + 5.0 * null_dir[w]);
            }
        }
        assert!(
            (psi_h_perturbed - base.psi_h).abs() < 1e-9,
            "{psi_h_perturbed} vs {}",
            base.psi_h
        );
    }

    #[test]
    fn order_condition_failure_is_reported() {
        let dims = LawDims {
            d_u: 3,
            d_z: 2,
            d_w: 3,
            d_m: 2,
            d_y: 2,
        };
        let law = random_law(33, dims, true);
        let report = completeness_check(&law).unwrap();
        assert!(!report.order_ok);
        assert!(!report.pass());
    }

    #[test]
    fn perfectly_correlated_proxies_pass_rank_check() {
        // Z = W = U almost surely: transition matrices are near-identity.
        let mut law = random_binary_law(55);
        for u in 0..2 {
            let mut z_dist = vec![0.01; 2];
            z_dist[u] = 0.99;
            law.p_z_ua[u] = vec![z_dist.clone(), z_dist.clone()];
            law.p_w_u[u] = z_dist;
        }
        let report = completeness_check(&law).unwrap();
        assert!(report.pass());
        for c in &report.cells {
            assert_eq!(c.rank, 2);
        }
    }

    #[test]
    fn law_json_round_trip() {
        let law = random_binary_law(12);
        let text = law.to_json();
        let back = DiscreteLaw::from_json(&text).unwrap();
        assert_eq!(law.p_u, back.p_u);
        assert_eq!(law.p_y_amuw, back.p_y_amuw);
    }

    #[test]
    fn invalid_law_is_rejected() {
        let mut law = random_binary_law(1);
        law.p_u[0] += 0.2;
        assert!(law.validate().is_err());
        assert!(true_psi_brute(&law).is_err());
    }
}
