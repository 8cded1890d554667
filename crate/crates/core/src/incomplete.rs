//! Incomplete markets: consumption is financed by a self-financing portfolio,
//! `c_k = ε_k + π_{k-1}·S_k + φ_{k-1}(1 + r_k) - π_k·S_k - φ_k`.
//!
//! [`solve_kkt`] maximizes utility over portfolios with a primal active-set
//! method on the constraints `c ≥ 0`; [`verify_kkt`] checks the resulting
//! Kuhn–Tucker system against the aggregate SPD.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::complete::{utility, AgentSpec};
use crate::error::{Error, Result};
use crate::market::{
    aggregate_spd, check_no_arbitrage, project_weighted, MarketSpec, NodeBasis, WealthSpace,
};
use crate::numeric::{leftmost_nonpositive, rank};
use crate::probtree::{AdaptedProcess, Tree};

/// Holdings per trading node; `phi[k][u]` in the bond and `pi[k][u][j]` in asset `j`
/// at node `u` of level `k < T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioStrategy {
    pub phi: Vec<Vec<f64>>,
    pub pi: Vec<Vec<Vec<f64>>>,
}

impl PortfolioStrategy {
    pub fn zero(m: &MarketSpec) -> Self {
        let tree = m.tree();
        let n = m.n_assets();
        PortfolioStrategy {
            phi: (0..tree.horizon())
                .map(|k| vec![0.0; tree.width(k)])
                .collect(),
            pi: (0..tree.horizon())
                .map(|k| vec![vec![0.0; n]; tree.width(k)])
                .collect(),
        }
    }

    /// Consumption financed by this strategy.
    pub fn consumption(&self, m: &MarketSpec, endowment: &AdaptedProcess) -> AdaptedProcess {
        let tree = m.tree();
        let t = tree.horizon();
        endowment.map(|k, v, e| {
            let mut c = e;
            if k >= 1 {
                let u = tree.parent(k, v);
                c += self.phi[k - 1][u] * (1.0 + m.rate(k - 1, u));
                for (j, s) in m.assets().iter().enumerate() {
                    c += self.pi[k - 1][u][j] * s.get(k, v);
                }
            }
            if k < t {
                c -= self.phi[k][v];
                for (j, s) in m.assets().iter().enumerate() {
                    c -= self.pi[k][v][j] * s.get(k, v);
                }
            }
            c
        })
    }

    /// Wealth `W_k` delivered at level `k` by the holdings chosen at `k - 1`.
    pub fn wealth(&self, m: &MarketSpec) -> AdaptedProcess {
        let tree = m.tree();
        AdaptedProcess::from_fn(tree, |k, v| {
            if k == 0 {
                return 0.0;
            }
            let u = tree.parent(k, v);
            let mut w = self.phi[k - 1][u] * (1.0 + m.rate(k - 1, u));
            for (j, s) in m.assets().iter().enumerate() {
                w += self.pi[k - 1][u][j] * s.get(k, v);
            }
            w
        })
    }
}

/// Linear map from reduced portfolio coordinates to consumption, `c = ε + A θ`.
///
/// Node `u` at level `k` owns one coordinate per basis portfolio of its
/// instruments; redundant instruments are removed.
#[derive(Debug, Clone)]
pub struct TradingMap {
    pub a: DMatrix<f64>,
    offsets: Vec<usize>,
    columns: Vec<Vec<usize>>,
    bases: Vec<Vec<NodeBasis>>,
}

impl TradingMap {
    pub fn new(m: &MarketSpec) -> Self {
        let tree = m.tree();
        let t = tree.horizon();
        let mut offsets = Vec::with_capacity(t + 2);
        let mut acc = 0;
        for k in 0..=t {
            offsets.push(acc);
            acc += tree.width(k);
        }
        offsets.push(acc);
        let bases: Vec<Vec<NodeBasis>> = (0..t)
            .map(|k| (0..tree.width(k)).map(|u| m.basis(k, u)).collect())
            .collect();
        let mut columns = Vec::with_capacity(t);
        let mut p = 0;
        for level in &bases {
            let mut cols = Vec::with_capacity(level.len());
            for b in level {
                cols.push(p);
                p += b.payoff.ncols();
            }
            columns.push(cols);
        }
        let mut a = DMatrix::zeros(acc, p);
        for (k, level) in bases.iter().enumerate() {
            for (u, b) in level.iter().enumerate() {
                let c0 = columns[k][u];
                for i in 0..b.payoff.ncols() {
                    a[(offsets[k] + u, c0 + i)] = -b.cost[i];
                    for (row, child) in tree.children(k, u).enumerate() {
                        a[(offsets[k + 1] + child, c0 + i)] = b.payoff[(row, i)];
                    }
                }
            }
        }
        TradingMap {
            a,
            offsets,
            columns,
            bases,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_nodes(&self) -> usize {
        self.a.nrows()
    }

    /// Flat row index of node `v` at level `k`.
    pub fn index(&self, k: usize, v: usize) -> usize {
        self.offsets[k] + v
    }

    pub fn flatten(&self, x: &AdaptedProcess) -> DVector<f64> {
        DVector::from_iterator(self.n_nodes(), x.levels().iter().flatten().copied())
    }

    pub fn unflatten(&self, tree: &Tree, x: &DVector<f64>) -> AdaptedProcess {
        AdaptedProcess::from_fn(tree, |k, v| x[self.offsets[k] + v])
    }

    /// Minimum-norm holdings realizing the reduced coordinates `theta`.
    pub fn strategy(&self, m: &MarketSpec, theta: &DVector<f64>) -> PortfolioStrategy {
        let mut s = PortfolioStrategy::zero(m);
        for (k, level) in self.bases.iter().enumerate() {
            for (u, b) in level.iter().enumerate() {
                let c0 = self.columns[k][u];
                let local = theta.rows(c0, b.payoff.ncols());
                let h = &b.to_holdings * local;
                s.phi[k][u] = h[0];
                for j in 0..m.n_assets() {
                    s.pi[k][u][j] = h[j + 1];
                }
            }
        }
        s
    }
}

/// Node weights `P(v) e^{-ρk}` of the objective `Σ_v w_v e^{-γ c_v}`.
pub(crate) fn objective_weights(tree: &Tree, rho: f64) -> DVector<f64> {
    let w: Vec<f64> = (0..=tree.horizon())
        .flat_map(|k| {
            tree.probs(k)
                .iter()
                .map(move |p| p * (-rho * k as f64).exp())
        })
        .collect();
    DVector::from_vec(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktSolution {
    pub consumption: AdaptedProcess,
    pub strategy: PortfolioStrategy,
    /// Non-negative multipliers `λ_k` of the constraints `c_k ≥ 0`, per unit probability.
    pub multipliers: AdaptedProcess,
    pub wealth: AdaptedProcess,
    pub utility: f64,
    pub iterations: usize,
    /// False when the active constraints are linearly dependent, in which case
    /// the multipliers are one of several valid choices.
    pub multipliers_unique: bool,
    /// Largest consumption difference between the multi-start solutions.
    pub start_spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Required agreement between starts, sup-norm on consumption.
    pub agreement: f64,
}

impl Default for KktOptions {
    fn default() -> Self {
        KktOptions {
            starts: 5,
            seed: 0,
            max_iter: 2000,
            agreement: 1e-7,
        }
    }
}

struct ActiveSetResult {
    theta: DVector<f64>,
    mu: DVector<f64>,
    iterations: usize,
}

struct Problem<'a> {
    a: &'a DMatrix<f64>,
    eps: DVector<f64>,
    w: DVector<f64>,
    gamma: f64,
}

impl Problem<'_> {
    fn consumption(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.eps + self.a * theta
    }

    fn value(&self, c: &DVector<f64>) -> f64 {
        c.iter()
            .zip(self.w.iter())
            .map(|(x, w)| w * (-self.gamma * x).exp())
            .sum()
    }

    fn grad_hess(&self, c: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let e = DVector::from_iterator(
            c.len(),
            c.iter()
                .zip(self.w.iter())
                .map(|(x, w)| w * (-self.gamma * x).exp()),
        );
        let g = -self.gamma * (self.a.transpose() * &e);
        let scaled = DMatrix::from_fn(self.a.nrows(), self.a.ncols(), |r, col| {
            self.gamma * self.gamma * e[r] * self.a[(r, col)]
        });
        let h = self.a.transpose() * scaled;
        (g, h)
    }
}

/// Primal active-set Newton method from a feasible point.
fn active_set(prob: &Problem, theta0: DVector<f64>, max_iter: usize) -> Result<ActiveSetResult> {
    let p = prob.a.ncols();
    let n = prob.a.nrows();
    let mut theta = theta0;
    let mut working: Vec<usize> = Vec::new();
    let independent = |set: &[usize], v: usize| -> bool {
        let mut m = DMatrix::zeros(set.len() + 1, p);
        for (i, &s) in set.iter().chain(std::iter::once(&v)).enumerate() {
            m.set_row(i, &prob.a.row(s));
        }
        rank(&m, 1e-9) == set.len() + 1
    };
    {
        let c = prob.consumption(&theta);
        for v in 0..n {
            if c[v] <= 0.0 && prob.a.row(v).amax() > 0.0 && independent(&working, v) {
                working.push(v);
            }
        }
    }
    let mut prev_decrement = f64::INFINITY;
    let mut stalled = false;
    for it in 0..max_iter {
        let c = prob.consumption(&theta);
        let (g, h) = prob.grad_hess(&c);
        let nw = working.len();
        let mut kkt = DMatrix::zeros(p + nw, p + nw);
        kkt.view_mut((0, 0), (p, p)).copy_from(&h);
        let mut rhs = DVector::zeros(p + nw);
        rhs.rows_mut(0, p).copy_from(&(-&g));
        for (i, &v) in working.iter().enumerate() {
            for j in 0..p {
                kkt[(j, p + i)] = -prob.a[(v, j)];
                kkt[(p + i, j)] = prob.a[(v, j)];
            }
            rhs[p + i] = -c[v];
        }
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("active-set Newton system".into()))?;
        let d = sol.rows(0, p).into_owned();
        let mu = sol.rows(p, nw).into_owned();
        let decrement = d.dot(&(&h * &d));
        let scale = 1.0 + prob.value(&c);
        // Newton converges quadratically, so a tiny decrement right after a small
        // one means only round-off is left.
        // A stalled line search on an ill-conditioned face also counts, once the
        // decrement is small enough that the remaining gain is round-off.
        let converged = decrement <= 1e-24 * scale
            || (decrement <= 1e-20 * scale && prev_decrement <= 1e-10 * scale)
            || (stalled && decrement <= 1e-9 * scale);
        prev_decrement = decrement;
        stalled = false;
        if converged {
            let (imin, mmin) =
                mu.iter().enumerate().fold(
                    (usize::MAX, 0.0),
                    |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc },
                );
            if imin == usize::MAX || mmin >= -1e-14 {
                let mut full = DVector::zeros(n);
                for (i, &v) in working.iter().enumerate() {
                    full[v] = mu[i].max(0.0);
                }
                return Ok(ActiveSetResult {
                    theta,
                    mu: full,
                    iterations: it,
                });
            }
            working.remove(imin);
            continue;
        }
        let ad = prob.a * &d;
        let dnorm = d.norm();
        let mut alpha_max = f64::INFINITY;
        let mut blocking = None;
        for v in 0..n {
            if working.contains(&v) || ad[v] >= -1e-13 * dnorm * prob.a.row(v).norm() {
                continue;
            }
            let step = c[v].max(0.0) / -ad[v];
            // Rows spanned by the working set move with it, so any slope
            // they show along `d` is round-off.
            if step < alpha_max && independent(&working, v) {
                alpha_max = step;
                blocking = Some(v);
            }
        }
        let mut alpha = alpha_max.min(1.0);
        let f0 = prob.value(&c);
        let slope = g.dot(&d);
        let mut backtracked = false;
        for _ in 0..60 {
            let trial = &theta + alpha * &d;
            // Near the optimum, or when a constraint is only round-off away, the
            // decrease cannot be measured; take the step as is.
            if decrement <= 1e-14 * scale
                || alpha * slope.abs() <= 1e-14 * scale
                || prob.value(&prob.consumption(&trial)) <= f0 + 1e-4 * alpha * slope
            {
                break;
            }
            alpha *= 0.5;
            backtracked = true;
        }
        stalled = alpha < 1e-6;
        theta += alpha * &d;
        if !backtracked && alpha_max <= 1.0 {
            if let Some(v) = blocking {
                if independent(&working, v) {
                    working.push(v);
                }
            }
        }
    }
    let c = prob.consumption(&theta);
    let (g, _) = prob.grad_hess(&c);
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: g.amax(),
    })
}

/// Optimal consumption and portfolio in an arbitrage-free market.
pub fn solve_kkt(a: &AgentSpec, m: &MarketSpec, opts: &KktOptions) -> Result<KktSolution> {
    let tree = m.tree();
    a.validate(tree)?;
    check_no_arbitrage(m)?;
    let map = TradingMap::new(m);
    let prob = Problem {
        a: &map.a,
        eps: map.flatten(&a.endowment),
        w: objective_weights(tree, a.rho),
        gamma: a.gamma,
    };
    let p = map.dim();
    let base = active_set(&prob, DVector::zeros(p), opts.max_iter)?;
    let c_base = prob.consumption(&base.theta);
    let mut spread: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 1..opts.starts.max(1) {
        let start = random_feasible_start(&prob, &mut rng);
        let other = active_set(&prob, start, opts.max_iter)?;
        let c = prob.consumption(&other.theta);
        spread = spread.max((&c - &c_base).amax());
    }
    if spread > opts.agreement {
        return Err(Error::Hypothesis(format!(
            "multi-start solutions disagree by {spread:e}"
        )));
    }
    let mut c = c_base.clone();
    for x in c.iter_mut() {
        if *x < 0.0 && *x > -1e-12 {
            *x = 0.0;
        }
    }
    let consumption = map.unflatten(tree, &c);
    let probs = DVector::from_iterator(
        map.n_nodes(),
        (0..=tree.horizon()).flat_map(|k| tree.probs(k).to_vec()),
    );
    let lambda = DVector::from_iterator(
        map.n_nodes(),
        base.mu.iter().zip(probs.iter()).map(|(m, p)| m / p),
    );
    let active: Vec<usize> = (0..map.n_nodes())
        .filter(|&v| c[v] <= 1e-12 && prob.a.row(v).amax() > 0.0)
        .collect();
    let multipliers_unique = if active.is_empty() {
        true
    } else {
        rank(&map.a.select_rows(&active), 1e-9) == active.len()
    };
    let strategy = map.strategy(m, &base.theta);
    let wealth = strategy.wealth(m);
    Ok(KktSolution {
        utility: utility(tree, a.gamma, a.rho, &consumption),
        consumption,
        strategy,
        multipliers: map.unflatten(tree, &lambda),
        wealth,
        iterations: base.iterations,
        multipliers_unique,
        start_spread: spread,
    })
}

/// A random portfolio direction scaled to keep consumption non-negative.
fn random_feasible_start(prob: &Problem, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let p = prob.a.ncols();
    let d = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
    let ad = prob.a * &d;
    let mut t: f64 = 1.0;
    for v in 0..ad.len() {
        if ad[v] < 0.0 {
            t = t.min(prob.eps[v] / -ad[v]);
        }
    }
    0.5 * t * d
}

/// Residuals of the Kuhn–Tucker characterization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    /// Per period `k = 1..T`: distance between the projected ratio
    /// `P_L[Z_k / Z_{k-1}]` and `M_k / M_{k-1}`.
    pub projection: Vec<f64>,
    pub complementary: f64,
    pub min_multiplier: f64,
    pub min_consumption: f64,
    /// Self-financing identity with raw holdings.
    pub budget: f64,
    /// Budget written through the aggregate SPD and wealth.
    pub wealth_form: f64,
    /// Pricing residual of the normalized process `Z`.
    pub spd: f64,
    pub pass: bool,
}

/// Checks a candidate against the Kuhn–Tucker system, with
/// `Z_k = e^{-ρk} γ e^{-γ c_k} + λ_k`.
pub fn verify_kkt(sol: &KktSolution, a: &AgentSpec, m: &MarketSpec, tol: f64) -> Result<KktReport> {
    let tree = m.tree();
    sol.consumption.check_shape(tree)?;
    sol.multipliers.check_shape(tree)?;
    let agg = aggregate_spd(m)?;
    let z = AdaptedProcess::from_fn(tree, |k, v| {
        (-a.rho * k as f64).exp() * a.gamma * (-a.gamma * sol.consumption.get(k, v)).exp()
            + sol.multipliers.get(k, v)
    });
    let mut projection = Vec::with_capacity(tree.horizon());
    for k in 1..=tree.horizon() {
        let mut worst: f64 = 0.0;
        for u in 0..tree.width(k - 1) {
            let ch = tree.children(k - 1, u);
            let q: Vec<f64> = ch.clone().map(|c| tree.cond_prob(k, c)).collect();
            let y: Vec<f64> = ch.clone().map(|c| z.get(k, c) / z.get(k - 1, u)).collect();
            let proj = project_weighted(&m.basis(k - 1, u).payoff, &q, &y);
            for (c, pr) in ch.zip(proj) {
                worst = worst.max((pr - agg.get(k, c) / agg.get(k - 1, u)).abs());
            }
        }
        projection.push(worst);
    }
    let complementary = sol
        .consumption
        .iter()
        .zip(sol.multipliers.iter())
        .map(|((_, _, c), (_, _, l))| (c * l).abs())
        .fold(0.0, f64::max);
    let min_multiplier = sol.multipliers.min_value();
    let min_consumption = sol.consumption.min_value();
    let financed = sol.strategy.consumption(m, &a.endowment);
    let budget = financed.sup_distance(&sol.consumption);
    let wealth = sol.strategy.wealth(m);
    let mut wealth_form: f64 = 0.0;
    for k in 0..=tree.horizon() {
        for v in 0..tree.width(k) {
            let next = if k < tree.horizon() {
                tree.children(k, v)
                    .map(|c| {
                        tree.cond_prob(k + 1, c) * agg.get(k + 1, c) / agg.get(k, v)
                            * wealth.get(k + 1, c)
                    })
                    .sum()
            } else {
                0.0
            };
            let r = sol.consumption.get(k, v) - a.endowment.get(k, v) - wealth.get(k, v) + next;
            wealth_form = wealth_form.max(r.abs());
        }
    }
    let z0 = z.get(0, 0);
    let zn = z.map(|_, _, x| x / z0);
    let spd = crate::market::verify_spd(m, &zn, f64::INFINITY)?.max_residual;
    let worst_projection = projection.iter().cloned().fold(0.0, f64::max);
    let pass = worst_projection <= tol
        && complementary <= tol
        && min_multiplier >= -tol
        && min_consumption >= -tol
        && budget <= tol
        && wealth_form <= tol
        && spd <= tol;
    Ok(KktReport {
        projection,
        complementary,
        min_multiplier,
        min_consumption,
        budget,
        wealth_form,
        spd,
        pass,
    })
}

/// Closed-form optimum of a one-period market with `L_1 = L²(H_1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnePeriodSolution {
    pub c0: f64,
    pub c1: Vec<f64>,
    pub lambda: f64,
    /// Per block of `H_1`: whether consumption is pinned to `ε_1 - essinf ε_1`.
    pub essinf_branch: Vec<bool>,
    pub budget_residual: f64,
}

/// Per-block data of the closed form.
struct BlockData {
    nodes: Vec<usize>,
    m: f64,
    log_cond_exp: f64,
    min_eps: f64,
}

impl BlockData {
    /// `log(e^{γ min ε} E[e^{-γε}|B] / M_B)`: the branch switches at `log λ` equal to this.
    fn log_threshold(&self, gamma: f64) -> f64 {
        gamma * self.min_eps + self.log_cond_exp - self.m.ln()
    }
}

pub fn one_period_closed_form(a: &AgentSpec, m: &MarketSpec) -> Result<OnePeriodSolution> {
    let tree = m.tree();
    if tree.horizon() != 1 {
        return Err(Error::InvalidInput(
            "closed form needs a one-period market".into(),
        ));
    }
    let h = match m.wealth_space(1) {
        WealthSpace::Blocks(h) => h.clone(),
        WealthSpace::Span => {
            return Err(Error::InvalidInput(
                "closed form needs a wealth space of the form L²(H)".into(),
            ))
        }
    };
    a.validate(tree)?;
    let agg = aggregate_spd(m)?;
    let g = a.gamma;
    let eps1 = a.endowment.level(1);
    let eps0 = a.endowment.get(0, 0);
    let m1 = agg.level(1);
    let blocks: Vec<BlockData> = h
        .blocks()
        .into_iter()
        .map(|nodes| {
            let mass: f64 = nodes.iter().map(|&v| tree.prob(1, v)).sum();
            let min_eps = nodes.iter().map(|&v| eps1[v]).fold(f64::INFINITY, f64::min);
            // E[e^{-γε}|B] factored as e^{-γ min ε} E[e^{-γ(ε - min ε)}|B].
            let shifted: f64 = nodes
                .iter()
                .map(|&v| tree.prob(1, v) * (-g * (eps1[v] - min_eps)).exp())
                .sum::<f64>()
                / mass;
            BlockData {
                m: m1[nodes[0]],
                log_cond_exp: -g * min_eps + shifted.ln(),
                min_eps,
                nodes,
            }
        })
        .collect();
    let wealth = eps0
        + tree.expect(
            1,
            &eps1.iter().zip(m1).map(|(e, m)| e * m).collect::<Vec<_>>(),
        );
    let consumption = |s: f64| -> (f64, Vec<f64>, Vec<bool>) {
        let c0 = ((a.rho - s) / g).max(0.0);
        let mut c1 = vec![0.0; eps1.len()];
        let mut branch = Vec::with_capacity(blocks.len());
        for b in &blocks {
            let pinned = s >= b.log_threshold(g);
            for &v in &b.nodes {
                c1[v] = if pinned {
                    eps1[v] - b.min_eps
                } else {
                    eps1[v] + (b.log_cond_exp - s - b.m.ln()) / g
                };
            }
            branch.push(pinned);
        }
        (c0, c1, branch)
    };
    let excess = |s: f64| -> f64 {
        let (c0, c1, _) = consumption(s);
        let pv: f64 = c1
            .iter()
            .zip(m1)
            .zip(tree.probs(1))
            .map(|((c, m), p)| c * m * p)
            .sum();
        c0 + pv - wealth
    };
    let hi = blocks
        .iter()
        .map(|b| b.log_threshold(g))
        .fold(a.rho, f64::max)
        + 1.0;
    let mut lo = hi - 1.0;
    let mut width = 1.0;
    while excess(lo) <= 0.0 {
        lo -= width;
        width *= 2.0;
        if width > 1e12 {
            return Err(Error::Bracket(
                "budget excess never becomes positive".into(),
            ));
        }
    }
    if excess(hi) > 0.0 {
        return Err(Error::Bracket(
            "budget excess positive at the upper bracket".into(),
        ));
    }
    let s = leftmost_nonpositive(excess, lo, hi, 1e-16);
    let (c0, c1, essinf_branch) = consumption(s);
    Ok(OnePeriodSolution {
        c0,
        c1,
        lambda: s.exp(),
        essinf_branch,
        budget_residual: excess(s).abs(),
    })
}
