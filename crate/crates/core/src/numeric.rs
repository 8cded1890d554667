//! Scalar root finding and small dense linear algebra helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Bisection on `[lo, hi]` for a function with a sign change.
///
/// Stops when the bracket is narrower than `xtol * max(1, |x|)`.
pub fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, xtol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::Bracket(format!(
            "no sign change on [{lo}, {hi}]: f = ({flo:e}, {fhi:e})"
        )));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= xtol * mid.abs().max(1.0) {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Leftmost `x` in `[lo, hi]` with `g(x) <= 0` for a non-increasing `g` with
/// `g(lo) > 0 >= g(hi)`.
pub fn leftmost_nonpositive(
    mut g: impl FnMut(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    xtol: f64,
) -> f64 {
    for _ in 0..400 {
        if (hi - lo).abs() <= xtol * (0.5 * (lo + hi)).abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Expands `[lo, hi]` geometrically around `x0` until `f` changes sign, for a
/// function that is decreasing in `x`.
pub fn bracket_decreasing(mut f: impl FnMut(f64) -> f64, x0: f64, step: f64) -> Result<(f64, f64)> {
    let mut lo = x0;
    let mut hi = x0;
    let mut width = step;
    for _ in 0..200 {
        if f(lo) > 0.0 && f(hi) <= 0.0 {
            return Ok((lo, hi));
        }
        if f(lo) <= 0.0 {
            lo -= width;
        }
        if f(hi) > 0.0 {
            hi += width;
        }
        width *= 2.0;
    }
    Err(Error::Bracket(format!(
        "could not bracket a root starting from {x0}"
    )))
}

/// Golden-section maximization of a unimodal function on `[a, b]`.
pub fn golden_max(
    mut f: impl FnMut(f64) -> f64,
    mut a: f64,
    mut b: f64,
    iters: usize,
) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        }
    }
    if f1 > f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// `log Σ w_i e^{a_i}` for positive weights.
pub fn log_sum_exp(weights: &[f64], exps: &[f64]) -> f64 {
    let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = weights
        .iter()
        .zip(exps)
        .map(|(w, a)| w * (a - m).exp())
        .sum();
    m + s.ln()
}

/// Orthonormal basis of the column space of `a`, the matching right factor
/// `V_r Σ_r^{-1}` and the numerical rank.
pub struct RangeBasis {
    pub u: DMatrix<f64>,
    pub v_sinv: DMatrix<f64>,
    pub rank: usize,
}

pub fn range_basis(a: &DMatrix<f64>, rtol: f64) -> RangeBasis {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return RangeBasis {
            u: DMatrix::zeros(rows, 0),
            v_sinv: DMatrix::zeros(cols, 0),
            rank: 0,
        };
    }
    // nalgebra's bidiagonal SVD can return a wrong U on rank-deficient input,
    // so this goes through faer, which is accurate there.
    let m = faer::Mat::<f64>::from_fn(rows, cols, |i, j| a[(i, j)]);
    let svd = m.thin_svd().expect("svd");
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let sv: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let keep: Vec<usize> = idx
        .into_iter()
        .filter(|&i| sv[i] > rtol * smax.max(f64::MIN_POSITIVE))
        .collect();
    let rank = keep.len();
    let mut ub = DMatrix::zeros(rows, rank);
    let mut vs = DMatrix::zeros(cols, rank);
    for (c, &i) in keep.iter().enumerate() {
        for r in 0..rows {
            ub[(r, c)] = u[(r, i)];
        }
        for r in 0..cols {
            vs[(r, c)] = v[(r, i)] / sv[i];
        }
    }
    RangeBasis {
        u: ub,
        v_sinv: vs,
        rank,
    }
}

pub fn rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    range_basis(a, rtol).rank
}

/// Least-squares solution of `a x = b` with the residual norm (max-abs).
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rtol: f64) -> (DVector<f64>, f64) {
    let basis = range_basis(a, rtol);
    let coeff = basis.u.transpose() * b;
    let x = &basis.v_sinv * coeff;
    let res = (a * &x - b).amax();
    (x, res)
}

/// Solves a square system by LU, failing on singularity.
pub fn solve_square(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("square system is singular".into()))
}
