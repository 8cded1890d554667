//! Precautionary savings in a one-period market with `L_1 = L²(H_1)`.
//!
//! The period-1 endowment is `ε_1(ε) = e^{εX}/E[e^{εX}|H_1]`, so its
//! conditional mean stays 1 while its conditional variance grows with `ε`.
//! For large enough `ε_0` the optimum is interior and
//!
//! ```text
//! c_0 (1 + E[M]) = ε_0 - E[M log E[e^{-γε_1}|H_1]]/γ + E[M log M]/γ + ρ E[M]/γ
//! c_1 = ε_1 + log(E[e^{-γε_1}|H_1]/M)/γ + c_0 - ρ/γ
//! ```
//!
//! with `λ = e^{ρ - γ c_0}`.

use serde::{Deserialize, Serialize};

use crate::complete::AgentSpec;
use crate::error::{Error, Result};
use crate::incomplete::{one_period_closed_form, solve_kkt, KktOptions};
use crate::market::{aggregate_spd, MarketSpec, WealthSpace};
use crate::probtree::{AdaptedProcess, SubAlgebra, Tree, TreeSpec};

/// Largest allowed upward step of `ĉ_0` along the grid.
pub const MONOTONE_TOL: f64 = 1e-9;
/// Agreement required between the closed form and the general solver.
pub const SOLVER_TOL: f64 = 1e-7;

/// `ε ∈ {0, 0.05, …, 1}`.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone)]
pub struct SavingsInstance {
    pub market: MarketSpec,
    pub gamma: f64,
    pub rho: f64,
    pub e0: f64,
    /// Level-1 values of the non-negative risk driver `X`.
    pub x: Vec<f64>,
    pub eps_grid: Vec<f64>,
}

/// Serialized instance. The market is built by `MarketSpec::type_c_one_period`
/// from `blocks` (block label per state), a block-constant `kernel` and `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavingsConfig {
    pub tree: TreeSpec,
    pub blocks: Vec<usize>,
    pub kernel: Vec<f64>,
    #[serde(default)]
    pub rate: f64,
    pub gamma: f64,
    #[serde(default)]
    pub rho: f64,
    pub e0: f64,
    pub x: Vec<f64>,
    #[serde(default)]
    pub eps_grid: Option<Vec<f64>>,
}

impl SavingsConfig {
    pub fn build(&self) -> Result<SavingsInstance> {
        let tree = self.tree.build()?;
        let h = SubAlgebra::new(&tree, 1, self.blocks.clone())?;
        let market = MarketSpec::type_c_one_period(tree, h, &self.kernel, self.rate)?;
        SavingsInstance::new(
            market,
            self.gamma,
            self.rho,
            self.e0,
            self.x.clone(),
            self.eps_grid.clone().unwrap_or_else(default_grid),
        )
    }
}

impl SavingsInstance {
    pub fn new(
        market: MarketSpec,
        gamma: f64,
        rho: f64,
        e0: f64,
        x: Vec<f64>,
        eps_grid: Vec<f64>,
    ) -> Result<Self> {
        let inst = SavingsInstance {
            market,
            gamma,
            rho,
            e0,
            x,
            eps_grid,
        };
        inst.validate()?;
        Ok(inst)
    }

    fn validate(&self) -> Result<()> {
        let tree = self.market.tree();
        if tree.horizon() != 1 {
            return Err(Error::InvalidInput(
                "precautionary savings needs a one-period market".into(),
            ));
        }
        self.h1()?;
        if self.x.len() != tree.width(1) {
            return Err(crate::error::dim(
                "risk driver X",
                tree.width(1),
                self.x.len(),
            ));
        }
        if self.x.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(
                "risk driver X must be non-negative".into(),
            ));
        }
        if self.eps_grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::InvalidInput("ε grid must lie in [0, 1]".into()));
        }
        if !(self.e0 >= 0.0 && self.e0.is_finite()) {
            return Err(Error::InvalidInput("ε_0 must be non-negative".into()));
        }
        // Validates γ and ρ.
        self.agent(0.0)?;
        Ok(())
    }

    pub fn tree(&self) -> &Tree {
        self.market.tree()
    }

    pub fn h1(&self) -> Result<&SubAlgebra> {
        match self.market.wealth_space(1) {
            WealthSpace::Blocks(h) => Ok(h),
            WealthSpace::Span => Err(Error::InvalidInput(
                "wealth space must be declared as L²(H_1)".into(),
            )),
        }
    }

    /// The agent facing income risk `ε`.
    pub fn agent(&self, eps: f64) -> Result<AgentSpec> {
        let tree = self.tree();
        let e1 = endowment_eps(tree, &self.x, eps, self.h1()?)?;
        AgentSpec::new(
            tree,
            self.gamma,
            self.rho,
            AdaptedProcess::new(tree, vec![vec![self.e0], e1])?,
        )
    }
}

/// `ε_1(ε) = e^{εX}/E[e^{εX}|H_1]`.
pub fn endowment_eps(tree: &Tree, x: &[f64], eps: f64, h1: &SubAlgebra) -> Result<Vec<f64>> {
    // Shifting X by its block maximum leaves the ratio unchanged and avoids overflow.
    let top = tree.ess_inf(1, &x.iter().map(|v| -v).collect::<Vec<_>>(), h1)?;
    let e: Vec<f64> = x
        .iter()
        .zip(&top)
        .map(|(v, t)| (eps * (v + t)).exp())
        .collect();
    let ce = tree.cond_expect(1, &e, h1)?;
    Ok(e.iter().zip(&ce).map(|(a, b)| a / b).collect())
}

/// `Var[ε_1(ε)|H_1] = E[e^{2εX}|H_1]/E[e^{εX}|H_1]² - 1` on every node.
pub fn cond_variance(tree: &Tree, x: &[f64], eps: f64, h1: &SubAlgebra) -> Result<Vec<f64>> {
    let top = tree.ess_inf(1, &x.iter().map(|v| -v).collect::<Vec<_>>(), h1)?;
    let e: Vec<f64> = x
        .iter()
        .zip(&top)
        .map(|(v, t)| (eps * (v + t)).exp())
        .collect();
    let e2: Vec<f64> = e.iter().map(|v| v * v).collect();
    let m1 = tree.cond_expect(1, &e, h1)?;
    let m2 = tree.cond_expect(1, &e2, h1)?;
    Ok(m1
        .iter()
        .zip(&m2)
        .map(|(a, b)| (b / (a * a) - 1.0).max(0.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub c0: f64,
    pub c1: Vec<f64>,
    pub lambda: f64,
    /// Both periods strictly positive under the interior formula.
    pub in_regime: bool,
    /// `|c_0 + E[M c_1] - ε_0 - E[M ε_1]|`.
    pub budget_residual: f64,
    /// Sup distance to the general Kuhn–Tucker solver.
    pub solver_gap: f64,
    /// Conditional variance of `ε_1`, one value per block.
    pub variance: Vec<f64>,
}

struct Interior {
    c0: f64,
    c1: Vec<f64>,
    budget: f64,
}

fn interior(inst: &SavingsInstance, m1: &[f64], e1: &[f64]) -> Result<Interior> {
    let tree = inst.tree();
    let h1 = inst.h1()?;
    let g = inst.gamma;
    let ce = tree.cond_expect(
        1,
        &e1.iter().map(|e| (-g * e).exp()).collect::<Vec<_>>(),
        h1,
    )?;
    let em = tree.expect(1, m1);
    let m_log_ce = tree.expect(
        1,
        &m1.iter()
            .zip(&ce)
            .map(|(m, c)| m * c.ln())
            .collect::<Vec<_>>(),
    );
    let m_log_m = tree.expect(1, &m1.iter().map(|m| m * m.ln()).collect::<Vec<_>>());
    let c0 = (inst.e0 - m_log_ce / g + m_log_m / g + inst.rho * em / g) / (1.0 + em);
    let c1: Vec<f64> = e1
        .iter()
        .zip(&ce)
        .zip(m1)
        .map(|((e, c), m)| e + (c / m).ln() / g + c0 - inst.rho / g)
        .collect();
    let pv = |x: &[f64]| tree.expect(1, &x.iter().zip(m1).map(|(a, m)| a * m).collect::<Vec<_>>());
    let budget = (c0 + pv(&c1) - inst.e0 - pv(e1)).abs();
    Ok(Interior { c0, c1, budget })
}

/// `ĉ_0(ε)` along the grid. Out-of-regime points fall back to the
/// constrained closed form and are flagged.
pub fn solve_c0_curve(inst: &SavingsInstance) -> Result<Vec<CurvePoint>> {
    let tree = inst.tree();
    let h1 = inst.h1()?;
    let m1 = aggregate_spd(&inst.market)?.level(1).to_vec();
    let opts = KktOptions::default();
    let mut out = Vec::with_capacity(inst.eps_grid.len());
    for &eps in &inst.eps_grid {
        let a = inst.agent(eps)?;
        let e1 = a.endowment.level(1).to_vec();
        let int = interior(inst, &m1, &e1)?;
        let in_regime = int.c0 > 0.0 && int.c1.iter().all(|c| *c > 0.0);
        let (c0, c1, budget) = if in_regime {
            (int.c0, int.c1, int.budget)
        } else {
            let cf = one_period_closed_form(&a, &inst.market)?;
            (cf.c0, cf.c1, cf.budget_residual)
        };
        let kkt = solve_kkt(&a, &inst.market, &opts)?;
        let solver_gap = c1
            .iter()
            .enumerate()
            .map(|(v, c)| (c - kkt.consumption.get(1, v)).abs())
            .fold((c0 - kkt.consumption.get(0, 0)).abs(), f64::max);
        let var = cond_variance(tree, &inst.x, eps, h1)?;
        let variance = h1.blocks().iter().map(|b| var[b[0]]).collect();
        out.push(CurvePoint {
            eps,
            c0,
            c1,
            lambda: (inst.rho - inst.gamma * c0).exp(),
            in_regime,
            budget_residual: budget,
            solver_gap,
            variance,
        });
    }
    Ok(out)
}

/// Smallest `ε_0` for which every grid point is interior.
pub fn regime_threshold(inst: &SavingsInstance) -> Result<f64> {
    let m1 = aggregate_spd(&inst.market)?.level(1).to_vec();
    let em = inst.tree().expect(1, &m1);
    let mut need = f64::NEG_INFINITY;
    for &eps in &inst.eps_grid {
        let e1 = inst.agent(eps)?.endowment.level(1).to_vec();
        let int = interior(inst, &m1, &e1)?;
        // c_1 - c_0 does not depend on ε_0, and c_0 moves by 1/(1 + E[M]) per unit of ε_0.
        let floor = int.c1.iter().map(|c| int.c0 - c).fold(0.0, f64::max);
        need = need.max((floor - int.c0) * (1.0 + em));
    }
    Ok((inst.e0 + need).max(0.0))
}

/// `∂ĉ_0/∂ε = E[M E[e^{-γε_1} ∂_ε ε_1|H_1]/E[e^{-γε_1}|H_1]]/(1 + E[M])`.
pub fn c0_derivative(inst: &SavingsInstance, eps: f64) -> Result<f64> {
    let tree = inst.tree();
    let h1 = inst.h1()?;
    let m1 = aggregate_spd(&inst.market)?.level(1).to_vec();
    let e1 = endowment_eps(tree, &inst.x, eps, h1)?;
    // ∂_ε ε_1 = ε_1 (X - E^Q[X|H_1]) with dQ/dP = ε_1.
    let xq = tree.cond_expect(
        1,
        &e1.iter()
            .zip(&inst.x)
            .map(|(e, x)| e * x)
            .collect::<Vec<_>>(),
        h1,
    )?;
    let de: Vec<f64> = e1
        .iter()
        .zip(&inst.x)
        .zip(&xq)
        .map(|((e, x), q)| e * (x - q))
        .collect();
    let w: Vec<f64> = e1.iter().map(|e| (-inst.gamma * e).exp()).collect();
    let num = tree.cond_expect(
        1,
        &w.iter().zip(&de).map(|(a, b)| a * b).collect::<Vec<_>>(),
        h1,
    )?;
    let den = tree.cond_expect(1, &w, h1)?;
    let inner: Vec<f64> = m1
        .iter()
        .zip(num.iter().zip(&den))
        .map(|(m, (n, d))| m * n / d)
        .collect();
    Ok(tree.expect(1, &inner) / (1.0 + tree.expect(1, &m1)))
}

/// Per block, `E^Q[X|H]E^Q[e^{-εX}|H] - E^Q[X e^{-εX}|H]` with
/// `dQ/dP ∝ e^{2εX}`. Non-negative by the FKG inequality.
pub fn variance_fkg_slack(inst: &SavingsInstance, eps: f64) -> Result<Vec<f64>> {
    let f: Vec<f64> = inst.x.clone();
    let g: Vec<f64> = inst.x.iter().map(|x| (-eps * x).exp()).collect();
    let q: Vec<f64> = inst.x.iter().map(|x| 2.0 * eps * x).collect();
    covariance_slack(inst, &q, &f, &g)
}

/// Per block, `E^Q[e^{-γε_1}|H]E^Q[X|H] - E^Q[X e^{-γε_1}|H]` with
/// `dQ/dP ∝ e^{εX}`. Non-negative by the FKG inequality.
pub fn savings_fkg_slack(inst: &SavingsInstance, eps: f64) -> Result<Vec<f64>> {
    let e1 = endowment_eps(inst.tree(), &inst.x, eps, inst.h1()?)?;
    let f: Vec<f64> = inst.x.clone();
    let g: Vec<f64> = e1.iter().map(|e| (-inst.gamma * e).exp()).collect();
    let q: Vec<f64> = inst.x.iter().map(|x| eps * x).collect();
    covariance_slack(inst, &q, &f, &g)
}

/// `E^Q[f|H]E^Q[g|H] - E^Q[fg|H]` per block with `dQ/dP ∝ e^{log_q}`.
fn covariance_slack(
    inst: &SavingsInstance,
    log_q: &[f64],
    f: &[f64],
    g: &[f64],
) -> Result<Vec<f64>> {
    let tree = inst.tree();
    let h1 = inst.h1()?;
    let top = log_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_q.iter().map(|l| (l - top).exp()).collect();
    let ew = tree.cond_expect(1, &w, h1)?;
    let cq = |x: &[f64]| -> Result<Vec<f64>> {
        let num = tree.cond_expect(
            1,
            &w.iter().zip(x).map(|(a, b)| a * b).collect::<Vec<_>>(),
            h1,
        )?;
        Ok(num.iter().zip(&ew).map(|(n, d)| n / d).collect())
    };
    let (ef, eg) = (cq(f)?, cq(g)?);
    let efg = cq(&f.iter().zip(g).map(|(a, b)| a * b).collect::<Vec<_>>())?;
    Ok(h1
        .blocks()
        .iter()
        .map(|b| {
            let v = b[0];
            ef[v] * eg[v] - efg[v]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub pass: bool,
    /// Largest `ĉ_0(ε_b) - ĉ_0(ε_a)` over `ε_a ≤ ε_b`.
    pub max_violation: f64,
    /// Grid indices `(a, b)` of the largest violation.
    pub location: Option<(usize, usize)>,
    /// Analytic `∂ĉ_0/∂ε` at each grid point.
    pub derivative: Vec<f64>,
    /// Largest upward step of the block variances along the grid (negative or
    /// zero when they are nondecreasing).
    pub variance_drop: f64,
}

/// Checks that `ĉ_0` is nonincreasing and the block variances nondecreasing.
pub fn monotonicity_report(
    inst: &SavingsInstance,
    curve: &[CurvePoint],
) -> Result<MonotonicityReport> {
    if let Some(p) = curve.iter().find(|p| !p.in_regime) {
        return Err(Error::Hypothesis(format!(
            "grid point ε = {} is outside the interior regime",
            p.eps
        )));
    }
    let mut idx: Vec<usize> = (0..curve.len()).collect();
    idx.sort_by(|&a, &b| curve[a].eps.total_cmp(&curve[b].eps));
    let mut max_violation = f64::NEG_INFINITY;
    let mut location = None;
    for (ia, &a) in idx.iter().enumerate() {
        for &b in &idx[ia + 1..] {
            let up = curve[b].c0 - curve[a].c0;
            if up > max_violation {
                max_violation = up;
                location = Some((a, b));
            }
        }
    }
    if location.is_none() {
        max_violation = 0.0;
    }
    let mut variance_drop: f64 = 0.0;
    for w in idx.windows(2) {
        for (lo, hi) in curve[w[0]].variance.iter().zip(&curve[w[1]].variance) {
            variance_drop = variance_drop.max(lo - hi);
        }
    }
    let derivative = curve
        .iter()
        .map(|p| c0_derivative(inst, p.eps))
        .collect::<Result<Vec<_>>>()?;
    let pass = max_violation <= MONOTONE_TOL && variance_drop <= MONOTONE_TOL;
    Ok(MonotonicityReport {
        pass,
        max_violation,
        location: location.filter(|_| max_violation > MONOTONE_TOL),
        derivative,
        variance_drop,
    })
}
