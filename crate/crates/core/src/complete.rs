//! Complete markets: the budget set is a single present-value constraint
//! `Σ_k E[ξ_k c_k] = Σ_k E[ξ_k ε_k]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::Spd;
use crate::probtree::{AdaptedProcess, Tree};

/// An exponential-utility agent `u(x) = -e^{-γx}` with impatience `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub gamma: f64,
    #[serde(default)]
    pub rho: f64,
    pub endowment: AdaptedProcess,
}

impl AgentSpec {
    pub fn new(tree: &Tree, gamma: f64, rho: f64, endowment: AdaptedProcess) -> Result<Self> {
        let a = AgentSpec {
            gamma,
            rho,
            endowment,
        };
        a.validate(tree)?;
        Ok(a)
    }

    pub fn validate(&self, tree: &Tree) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "risk aversion must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "impatience must be non-negative, got {}",
                self.rho
            )));
        }
        self.endowment.check_shape(tree)?;
        if let Some((k, v, x)) = self
            .endowment
            .iter()
            .find(|&(_, _, x)| !(x >= 0.0 && x.is_finite()))
        {
            return Err(Error::InvalidInput(format!(
                "endowment {x} at level {k}, node {v} is negative or not finite"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsumptionSolution {
    pub consumption: AdaptedProcess,
    /// `λ̃` for the unconstrained problem, `λ*` for the constrained one.
    pub multiplier: f64,
    pub utility: f64,
    pub budget_residual: f64,
}

/// `Σ_k -e^{-ρk} E[e^{-γ c_k}]`.
pub fn utility(tree: &Tree, gamma: f64, rho: f64, c: &AdaptedProcess) -> f64 {
    (0..=tree.horizon())
        .map(|k| {
            let e: f64 = tree
                .probs(k)
                .iter()
                .zip(c.level(k))
                .map(|(p, x)| p * (-gamma * x).exp())
                .sum();
            -(-rho * k as f64).exp() * e
        })
        .sum()
}

/// `Σ_k E[ξ_k x_k]`.
pub fn present_value(tree: &Tree, xi: &Spd, x: &AdaptedProcess) -> f64 {
    (0..=tree.horizon())
        .map(|k| {
            tree.probs(k)
                .iter()
                .zip(xi.level(k))
                .zip(x.level(k))
                .map(|((p, s), v)| p * s * v)
                .sum::<f64>()
        })
        .sum()
}

fn check(tree: &Tree, a: &AgentSpec, xi: &Spd) -> Result<f64> {
    a.validate(tree)?;
    xi.process().check_shape(tree)?;
    let pv = present_value(tree, xi, &a.endowment);
    if !(pv > 0.0) {
        return Err(Error::ZeroPresentValue);
    }
    Ok(pv)
}

/// Breakpoints `log γ - ρk - log ξ_k` and weights `P ξ_k` over all nodes.
fn breakpoints(tree: &Tree, a: &AgentSpec, xi: &Spd) -> Vec<(f64, f64)> {
    let lg = a.gamma.ln();
    let mut out = Vec::with_capacity(tree.total_nodes());
    for k in 0..=tree.horizon() {
        for (v, &p) in tree.probs(k).iter().enumerate() {
            let x = xi.get(k, v);
            out.push((lg - a.rho * k as f64 - x.ln(), p * x));
        }
    }
    out
}

fn consumption_at<'a>(
    a: &'a AgentSpec,
    xi: &'a Spd,
    log_lambda: f64,
    clip: bool,
) -> impl Fn(usize, usize) -> f64 + 'a {
    move |k, v| {
        let c = (a.gamma.ln() - log_lambda - a.rho * k as f64 - xi.get(k, v).ln()) / a.gamma;
        if clip {
            c.max(0.0)
        } else {
            c
        }
    }
}

fn finish(
    tree: &Tree,
    a: &AgentSpec,
    xi: &Spd,
    consumption: AdaptedProcess,
    multiplier: f64,
    pv: f64,
) -> ConsumptionSolution {
    let budget_residual = (present_value(tree, xi, &consumption) - pv).abs();
    ConsumptionSolution {
        utility: utility(tree, a.gamma, a.rho, &consumption),
        consumption,
        multiplier,
        budget_residual,
    }
}

/// Optimal consumption when negative consumption is allowed.
pub fn solve_unconstrained(tree: &Tree, a: &AgentSpec, xi: &Spd) -> Result<ConsumptionSolution> {
    let pv = check(tree, a, xi)?;
    let bp = breakpoints(tree, a, xi);
    let w: f64 = bp.iter().map(|(_, w)| w).sum();
    let aw: f64 = bp.iter().map(|(b, w)| b * w).sum();
    let log_lambda = (aw - a.gamma * pv) / w;
    let c = AdaptedProcess::from_fn(tree, consumption_at(a, xi, log_lambda, false));
    Ok(finish(tree, a, xi, c, log_lambda.exp(), pv))
}

/// `ψ(λ) = Σ_k E[ξ_k I(λ e^{ρk} ξ_k)]` with `I(y) = (log(γ/y))⁺/γ`.
pub fn psi(tree: &Tree, a: &AgentSpec, xi: &Spd, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!(
            "multiplier must be positive, got {lambda}"
        )));
    }
    let s = lambda.ln();
    Ok(breakpoints(tree, a, xi)
        .iter()
        .map(|(b, w)| w * (b - s).max(0.0))
        .sum::<f64>()
        / a.gamma)
}

/// The unique `λ*` with `ψ(λ*) = Σ_k E[ξ_k ε_k]`.
///
/// `ψ` is piecewise affine and non-increasing in `log λ`, so the root is found
/// exactly by locating the affine piece that contains it.
pub fn solve_lambda_star(tree: &Tree, a: &AgentSpec, xi: &Spd) -> Result<f64> {
    let pv = check(tree, a, xi)?;
    Ok(log_lambda_star(breakpoints(tree, a, xi), a.gamma, pv).exp())
}

fn log_lambda_star(mut bp: Vec<(f64, f64)>, gamma: f64, pv: f64) -> f64 {
    bp.sort_by(|x, y| y.0.total_cmp(&x.0));
    let target = gamma * pv;
    let (mut w, mut aw) = (0.0, 0.0);
    for i in 0..bp.len() {
        w += bp[i].1;
        aw += bp[i].0 * bp[i].1;
        // On the piece where the first i+1 breakpoints are active,
        // γψ = aw - w s for s in [b_{i+1}, b_i].
        let s = (aw - target) / w;
        let lower = bp.get(i + 1).map_or(f64::NEG_INFINITY, |b| b.0);
        if s >= lower {
            return s;
        }
    }
    unreachable!("the last piece extends to -inf")
}

/// Optimal non-negative consumption `c_k = c̃_k(λ*)⁺`.
pub fn constrained_consumption(
    tree: &Tree,
    a: &AgentSpec,
    xi: &Spd,
) -> Result<ConsumptionSolution> {
    let pv = check(tree, a, xi)?;
    let log_lambda = log_lambda_star(breakpoints(tree, a, xi), a.gamma, pv);
    let c = AdaptedProcess::from_fn(tree, consumption_at(a, xi, log_lambda, true));
    Ok(finish(tree, a, xi, c, log_lambda.exp(), pv))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityCertificate {
    pub holds: bool,
    /// Closed-form strictly positive consumption, present when `holds`.
    pub consumption: Option<AdaptedProcess>,
}

/// Sufficient condition for strictly positive optimal consumption: `ξ_k < C`
/// and `ε_k > (log(C/ξ_k) + ρ(T-k))/γ` on every node.
pub fn positivity_certificate(
    tree: &Tree,
    a: &AgentSpec,
    xi: &Spd,
    bound: f64,
) -> Result<PositivityCertificate> {
    if !(bound > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bound must be positive, got {bound}"
        )));
    }
    a.validate(tree)?;
    let t = tree.horizon() as f64;
    let holds = (0..=tree.horizon()).all(|k| {
        (0..tree.width(k)).all(|v| {
            let x = xi.get(k, v);
            x < bound
                && a.endowment.get(k, v) > ((bound / x).ln() + a.rho * (t - k as f64)) / a.gamma
        })
    });
    if !holds {
        return Ok(PositivityCertificate {
            holds,
            consumption: None,
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..=tree.horizon() {
        for (v, &p) in tree.probs(k).iter().enumerate() {
            let x = xi.get(k, v);
            num += p * x * (a.gamma * a.endowment.get(k, v) + x.ln() + a.rho * k as f64);
            den += p * x;
        }
    }
    let level = num / den;
    let c = AdaptedProcess::from_fn(tree, |k, v| {
        (level - a.rho * k as f64 - xi.get(k, v).ln()) / a.gamma
    });
    Ok(PositivityCertificate {
        holds,
        consumption: Some(c),
    })
}
