//! Brute-force maximizers used to cross-check the closed forms and the
//! active-set solver. They share no code path with those solvers beyond the
//! objective and the portfolio parametrization.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::complete::{present_value, utility, AgentSpec};
use crate::error::{Error, Result};
use crate::incomplete::{objective_weights, TradingMap};
use crate::market::{check_no_arbitrage, MarketSpec, Spd};
use crate::numeric::range_basis;
use crate::probtree::{AdaptedProcess, Tree};

/// Projected-gradient iterations before the Newton polish.
pub const PG_ITERATIONS: usize = 5000;
/// Penalty weights for the incomplete-market continuation.
pub const PENALTY_LADDER: [f64; 7] = [1e1, 1e2, 1e3, 1e4, 1e6, 1e8, 1e10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    ProjectedGradient,
    ActiveSetNewton,
    PenaltyContinuation,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    /// Decision variables: node consumptions (complete) or reduced portfolio
    /// coordinates (incomplete).
    pub argmax: Vec<f64>,
    pub consumption: AdaptedProcess,
    pub value: f64,
    pub method: OracleMethod,
    pub iterations: usize,
    pub feasibility: f64,
    pub stationarity: f64,
}

/// Maximizes utility over node consumptions subject to the single budget
/// constraint, with or without `c ≥ 0`.
pub fn oracle_complete(
    tree: &Tree,
    a: &AgentSpec,
    xi: &Spd,
    allow_negative: bool,
) -> Result<OracleResult> {
    a.validate(tree)?;
    let pv = present_value(tree, xi, &a.endowment);
    let flat = |x: &AdaptedProcess| -> Vec<f64> { x.levels().iter().flatten().copied().collect() };
    let w = objective_weights(tree, a.rho);
    let probs: Vec<f64> = (0..=tree.horizon())
        .flat_map(|k| tree.probs(k).to_vec())
        .collect();
    let b: Vec<f64> = probs
        .iter()
        .zip(flat(xi.process()))
        .map(|(p, x)| p * x)
        .collect();
    let eps = flat(&a.endowment);
    let n = eps.len();
    let g = a.gamma;

    let (c, method, iterations) = if allow_negative {
        let free = vec![true; n];
        let (c, it) = newton_on_free_set(&w, &b, g, pv, &free, eps.clone())?;
        (c, OracleMethod::ActiveSetNewton, it)
    } else {
        if !(pv > 0.0) {
            return Err(Error::ZeroPresentValue);
        }
        // Projected gradient on {c ≥ 0, b·c = pv} with the fixed step 1/L,
        // where L = max w γ² bounds the Hessian on the feasible set.
        let step = 1.0 / w.iter().map(|x| x * g * g).fold(0.0, f64::max);
        let mut c = eps.clone();
        for _ in 0..PG_ITERATIONS {
            let y: Vec<f64> = (0..n)
                .map(|v| c[v] + step * w[v] * g * (-g * c[v]).exp())
                .collect();
            c = project_budget(&y, &b, pv);
        }
        let mut free: Vec<bool> = c.iter().map(|&x| x > 1e-9).collect();
        let mut polished = None;
        let mut total = PG_ITERATIONS;
        for _ in 0..2 * n + 2 {
            let (cand, it) = match newton_on_free_set(&w, &b, g, pv, &free, c.clone()) {
                Ok(r) => r,
                Err(_) => break,
            };
            total += it;
            let nu = multiplier(&w, &b, g, &cand, &free);
            let worst_free = (0..n)
                .filter(|&v| free[v])
                .min_by(|&i, &j| cand[i].total_cmp(&cand[j]));
            if let Some(v) = worst_free.filter(|&v| cand[v] < -1e-13) {
                free[v] = false;
                continue;
            }
            // A bound node wants to be freed when its marginal utility at zero
            // exceeds the price of consumption there.
            let violator = (0..n)
                .filter(|&v| !free[v])
                .map(|v| (v, w[v] * g - nu * b[v]))
                .max_by(|x, y| x.1.total_cmp(&y.1));
            if let Some((v, _)) = violator.filter(|(_, gap)| *gap > 1e-12) {
                free[v] = true;
                continue;
            }
            polished = Some(cand.iter().map(|&x| x.max(0.0)).collect::<Vec<_>>());
            break;
        }
        match polished {
            Some(p) => (p, OracleMethod::ActiveSetNewton, total),
            None => (c, OracleMethod::ProjectedGradient, total),
        }
    };
    let consumption = AdaptedProcess::from_fn(tree, {
        let mut idx = 0;
        let c = c.clone();
        move |_, _| {
            idx += 1;
            c[idx - 1]
        }
    });
    let spent: f64 = b.iter().zip(&c).map(|(x, y)| x * y).sum();
    let mut feasibility = (spent - pv).abs();
    if !allow_negative {
        feasibility = feasibility.max(c.iter().fold(0.0, |m: f64, &x| m.max(-x)));
    }
    let free: Vec<bool> = c.iter().map(|&x| allow_negative || x > 0.0).collect();
    let nu = multiplier(&w, &b, g, &c, &free);
    let stationarity = (0..n)
        .filter(|&v| free[v])
        .map(|v| (w[v] * g * (-g * c[v]).exp() - nu * b[v]).abs())
        .fold(0.0, f64::max);
    Ok(OracleResult {
        value: utility(tree, a.gamma, a.rho, &consumption),
        argmax: c,
        consumption,
        method,
        iterations,
        feasibility,
        stationarity,
    })
}

/// Euclidean projection onto `{c ≥ 0, b·c = pv}`: `c = (y - τ b)⁺` with `τ`
/// chosen by bisection.
fn project_budget(y: &[f64], b: &[f64], pv: f64) -> Vec<f64> {
    let spend = |tau: f64| -> f64 {
        y.iter()
            .zip(b)
            .map(|(yv, bv)| bv * (yv - tau * bv).max(0.0))
            .sum()
    };
    let mut lo = -1.0;
    while spend(lo) < pv {
        lo *= 2.0;
    }
    let mut hi = 1.0;
    while spend(hi) > pv {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spend(mid) > pv {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    y.iter()
        .zip(b)
        .map(|(yv, bv)| (yv - tau * bv).max(0.0))
        .collect()
}

/// Least-squares budget multiplier from stationarity on the free nodes.
fn multiplier(w: &DVector<f64>, b: &[f64], g: f64, c: &[f64], free: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for v in 0..c.len() {
        if free[v] {
            num += w[v] * g * (-g * c[v]).exp() * b[v];
            den += b[v] * b[v];
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Newton's method on the stationarity system of the free nodes
/// `w γ e^{-γ c} = ν b`, `b·c = pv`, with bound nodes fixed at zero.
fn newton_on_free_set(
    w: &DVector<f64>,
    b: &[f64],
    g: f64,
    pv: f64,
    free: &[bool],
    start: Vec<f64>,
) -> Result<(Vec<f64>, usize)> {
    let idx: Vec<usize> = (0..b.len()).filter(|&v| free[v]).collect();
    if idx.is_empty() {
        return Err(Error::Singular("no free nodes".into()));
    }
    let m = idx.len();
    let mut c: Vec<f64> = (0..b.len())
        .map(|v| if free[v] { start[v] } else { 0.0 })
        .collect();
    let mut nu = multiplier(w, b, g, &c, free).max(1e-300);
    let residual = |c: &[f64], nu: f64| -> DVector<f64> {
        let mut r = DVector::zeros(m + 1);
        for (i, &v) in idx.iter().enumerate() {
            r[i] = w[v] * g * (-g * c[v]).exp() - nu * b[v];
        }
        r[m] = idx.iter().map(|&v| b[v] * c[v]).sum::<f64>() - pv;
        r
    };
    for it in 0..200 {
        let r = residual(&c, nu);
        if r.amax() < 1e-15 {
            return Ok((c, it));
        }
        let mut jac = DMatrix::zeros(m + 1, m + 1);
        for (i, &v) in idx.iter().enumerate() {
            jac[(i, i)] = -w[v] * g * g * (-g * c[v]).exp();
            jac[(i, m)] = -b[v];
            jac[(m, i)] = b[v];
        }
        let step = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::Singular("oracle Newton system".into()))?;
        let norm0 = r.norm();
        let mut t = 1.0;
        loop {
            let mut trial = c.clone();
            for (i, &v) in idx.iter().enumerate() {
                trial[v] += t * step[i];
            }
            let tn = nu + t * step[m];
            if residual(&trial, tn).norm() < norm0 || t < 1e-10 {
                c = trial;
                nu = tn;
                break;
            }
            t *= 0.5;
        }
    }
    let r = residual(&c, nu);
    if r.amax() < 1e-11 {
        Ok((c, 200))
    } else {
        Err(Error::NoConvergence {
            iterations: 200,
            residual: r.amax(),
        })
    }
}

/// Maximizes utility over portfolios by penalty continuation on `c ≥ 0`,
/// followed by an equality-constrained polish on the detected active set.
pub fn oracle_incomplete(a: &AgentSpec, m: &MarketSpec) -> Result<OracleResult> {
    let tree = m.tree();
    a.validate(tree)?;
    check_no_arbitrage(m)?;
    let map = TradingMap::new(m);
    let amat = &map.a;
    let eps = map.flatten(&a.endowment);
    let w = objective_weights(tree, a.rho);
    let g = a.gamma;
    let p = map.dim();
    let n = map.n_nodes();

    let penalized = |theta: &DVector<f64>, mu: f64| -> f64 {
        let c = &eps + amat * theta;
        c.iter()
            .zip(w.iter())
            .map(|(x, wv)| wv * (-g * x).exp() + 0.5 * mu * x.min(0.0).powi(2))
            .sum()
    };
    let mut theta = DVector::zeros(p);
    let mut iterations = 0;
    for &mu in &PENALTY_LADDER {
        for _ in 0..200 {
            iterations += 1;
            let c = &eps + amat * &theta;
            let dg = DVector::from_fn(n, |v, _| -g * w[v] * (-g * c[v]).exp() + mu * c[v].min(0.0));
            let dh = DVector::from_fn(n, |v, _| {
                g * g * w[v] * (-g * c[v]).exp() + if c[v] < 0.0 { mu } else { 0.0 }
            });
            let grad = amat.transpose() * &dg;
            let hess = amat.transpose() * DMatrix::from_fn(n, p, |r, col| dh[r] * amat[(r, col)]);
            let Some(d) = hess.cholesky().map(|ch| ch.solve(&(-&grad))) else {
                return Err(Error::Singular("penalized Hessian".into()));
            };
            let dec = -grad.dot(&d);
            if dec < 1e-26 {
                break;
            }
            let f0 = penalized(&theta, mu);
            let mut t = 1.0;
            while penalized(&(&theta + t * &d), mu) > f0 - 1e-4 * t * dec && t > 1e-12 {
                t *= 0.5;
            }
            theta += t * &d;
        }
    }
    let c_pen = &eps + amat * &theta;
    let scale = eps.amax().max(1.0);
    let mut method = OracleMethod::PenaltyContinuation;
    let active: Vec<usize> = (0..n)
        .filter(|&v| c_pen[v] < 1e-6 * scale && amat.row(v).amax() > 0.0)
        .collect();
    if let Some((polished, it)) = polish_on_active(amat, &eps, &w, g, &active, &theta) {
        let c = &eps + amat * &polished;
        if c.iter().all(|&x| x >= -1e-12) {
            theta = polished;
            method = OracleMethod::ActiveSetNewton;
            iterations += it;
        }
    }
    let c = &eps + amat * &theta;
    let cvec: Vec<f64> = c
        .iter()
        .map(|&x| if x < 0.0 && x > -1e-12 { 0.0 } else { x })
        .collect();
    let consumption = map.unflatten(tree, &DVector::from_vec(cvec.clone()));
    let feasibility = cvec.iter().fold(0.0, |acc: f64, &x| acc.max(-x));
    let stationarity = {
        // Gradient restricted to directions that keep active nodes at zero.
        let act: Vec<usize> = (0..n).filter(|&v| cvec[v] <= 1e-9).collect();
        let full = amat.transpose() * DVector::from_fn(n, |v, _| g * w[v] * (-g * cvec[v]).exp());
        if act.is_empty() {
            full.amax()
        } else {
            let rb = range_basis(&amat.select_rows(&act).transpose(), 1e-10);
            let proj = &full - &rb.u * (rb.u.transpose() * &full);
            proj.amax()
        }
    };
    Ok(OracleResult {
        value: utility(tree, a.gamma, a.rho, &consumption),
        argmax: theta.iter().copied().collect(),
        consumption,
        method,
        iterations,
        feasibility,
        stationarity,
    })
}

/// Minimizes `Σ w e^{-γc}` over `θ` with `c_v = 0` on `active`, by Newton's
/// method in a null-space parametrization.
fn polish_on_active(
    amat: &DMatrix<f64>,
    eps: &DVector<f64>,
    w: &DVector<f64>,
    g: f64,
    active: &[usize],
    start: &DVector<f64>,
) -> Option<(DVector<f64>, usize)> {
    let p = amat.ncols();
    let n = amat.nrows();
    let (base, null) = if active.is_empty() {
        (start.clone(), DMatrix::identity(p, p))
    } else {
        let a_act = amat.select_rows(active);
        let rhs = -DVector::from_iterator(active.len(), active.iter().map(|&v| eps[v]));
        let (x, res) = crate::numeric::lstsq(&a_act, &rhs, 1e-10);
        if res > 1e-10 {
            return None;
        }
        let row_space = range_basis(&a_act.transpose(), 1e-10).u;
        let complement = DMatrix::identity(p, p) - &row_space * row_space.transpose();
        let null = range_basis(&complement, 1e-8).u;
        // Start from the projection of the penalty solution onto the affine set.
        let base = &x + &null * (null.transpose() * (start - &x));
        (base, null)
    };
    let q = null.ncols();
    let mut z = DVector::zeros(q);
    let f = |z: &DVector<f64>| -> f64 {
        let c = eps + amat * (&base + &null * z);
        c.iter()
            .zip(w.iter())
            .map(|(x, wv)| wv * (-g * x).exp())
            .sum()
    };
    let an = amat * &null;
    for it in 0..100 {
        let c = eps + amat * (&base + &null * &z);
        let e = DVector::from_fn(n, |v, _| w[v] * (-g * c[v]).exp());
        let grad = -g * (an.transpose() * &e);
        let hess = an.transpose() * DMatrix::from_fn(n, q, |r, col| g * g * e[r] * an[(r, col)]);
        let d = match hess.cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => return None,
        };
        let dec = -grad.dot(&d);
        if dec < 1e-28 {
            return Some((&base + &null * &z, it));
        }
        let f0 = f(&z);
        let mut t = 1.0;
        while f(&(&z + t * &d)) > f0 - 1e-4 * t * dec && t > 1e-12 {
            t *= 0.5;
        }
        z += t * d;
    }
    Some((&base + &null * &z, 100))
}
