//! Zero-coupon bond prices and yields when the aggregate endowment is a random
//! walk `ε_t = X_1 + … + X_t` with i.i.d. non-negative increments shared
//! equally by the agents.
//!
//! Prices are exact: the law of `ε_t` is built by repeated convolution on the
//! lattice generated by the increment support. The convolution runs under the
//! exponentially tilted law with parameter `θ = -1/Σ_l 1/γ_l`, which keeps the
//! probabilities of order one where the price concentrates and lets yields and
//! their gaps to the long-run limit be formed in log space.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::Level;
use crate::error::{Error, Result};
use crate::numeric::{golden_max, log_sum_exp};

/// Largest number of lattice points a convolution may hold.
pub const LATTICE_CAP: usize = 1_000_000;
const LATTICE_RTOL: f64 = 1e-9;

/// Law of a single endowment increment `X_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawLaw")]
pub struct IncrementLaw {
    support: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLaw {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<RawLaw> for IncrementLaw {
    type Error = Error;

    fn try_from(raw: RawLaw) -> Result<Self> {
        IncrementLaw::new(raw.support, raw.probs)
    }
}

impl IncrementLaw {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(crate::error::dim(
                "increment probabilities",
                support.len(),
                probs.len(),
            ));
        }
        if let Some(x) = support.iter().find(|&&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "increment support point {x} must be non-negative"
            )));
        }
        for (i, a) in support.iter().enumerate() {
            if support[..i].contains(a) {
                return Err(Error::InvalidInput(format!("duplicate support point {a}")));
            }
        }
        if let Some(p) = probs.iter().find(|&&p| !(p > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "increment probability {p} must be positive"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "increment probabilities sum to {total}"
            )));
        }
        let law = IncrementLaw { support, probs };
        if !(law.mean() > 0.0) {
            return Err(Error::InvalidInput(
                "increment mean must be positive".into(),
            ));
        }
        Ok(law)
    }

    /// `X` uniform on the given points.
    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let n = support.len() as f64;
        let probs = vec![1.0 / n; support.len()];
        Self::new(support, probs)
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(x, p)| x * p)
            .sum()
    }

    pub fn min(&self) -> f64 {
        self.support.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.support
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Λ(x) = log E[e^{xX}]`.
    pub fn log_mgf(&self, x: f64) -> f64 {
        let e: Vec<f64> = self.support.iter().map(|s| x * s).collect();
        log_sum_exp(&self.probs, &e)
    }

    /// Law under the tilt `dQ/dP = e^{θX}/E[e^{θX}]`.
    pub fn tilted(&self, theta: f64) -> Vec<f64> {
        let l = self.log_mgf(theta);
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(s, p)| p * (theta * s - l).exp())
            .collect()
    }

    /// `(Λ'(x), Λ''(x))`: mean and variance under the tilt `x`.
    fn derivatives(&self, x: f64) -> (f64, f64) {
        let q = self.tilted(x);
        let m: f64 = q.iter().zip(&self.support).map(|(q, s)| q * s).sum();
        let v: f64 = q
            .iter()
            .zip(&self.support)
            .map(|(q, s)| q * (s - m) * (s - m))
            .sum();
        (m, v)
    }

    /// Common step `h` and integer positions `n_i` with `support_i = n_i h`.
    fn lattice(&self) -> Result<(f64, Vec<usize>)> {
        let top = self.max();
        let tol = LATTICE_RTOL * top;
        let mut h: f64 = 0.0;
        for &s in &self.support {
            let (mut a, mut b) = (h.max(s), h.min(s));
            while b > tol {
                let r = a % b;
                a = b;
                b = if r > tol && b - r > tol { r } else { 0.0 };
            }
            h = a;
        }
        if top / h > LATTICE_CAP as f64 {
            return Err(Error::InvalidInput(
                "increment support does not lie on a common lattice".into(),
            ));
        }
        let idx: Vec<usize> = self
            .support
            .iter()
            .map(|s| (s / h).round() as usize)
            .collect();
        if self
            .support
            .iter()
            .zip(&idx)
            .any(|(s, &n)| (n as f64 * h - s).abs() > tol)
        {
            return Err(Error::InvalidInput(
                "increment support does not lie on a common lattice".into(),
            ));
        }
        Ok((h, idx))
    }
}

/// A real number or `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Extended {
    Finite(f64),
    PosInfinity,
}

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(x) => Some(x),
            Extended::PosInfinity => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::PosInfinity)
    }

    pub fn add(self, x: f64) -> Extended {
        match self {
            Extended::Finite(y) => Extended::Finite(x + y),
            Extended::PosInfinity => Extended::PosInfinity,
        }
    }

    pub fn min(self, other: Extended) -> Extended {
        match (self, other) {
            (Extended::Finite(a), Extended::Finite(b)) => Extended::Finite(a.min(b)),
            (Extended::PosInfinity, o) | (o, Extended::PosInfinity) => o,
        }
    }

    pub fn le(self, other: Extended) -> bool {
        match (self, other) {
            (_, Extended::PosInfinity) => true,
            (Extended::PosInfinity, Extended::Finite(_)) => false,
            (Extended::Finite(a), Extended::Finite(b)) => a <= b,
        }
    }
}

/// `Λ` and its Legendre transform `Λ*` for an increment law.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFunction {
    law: IncrementLaw,
}

impl RateFunction {
    pub fn new(law: IncrementLaw) -> Self {
        RateFunction { law }
    }

    pub fn log_mgf(&self, x: f64) -> f64 {
        self.law.log_mgf(x)
    }

    pub fn legendre(&self, y: f64) -> Extended {
        legendre(self, y)
    }
}

/// `Λ*(y) = sup_x (xy - Λ(x))`.
///
/// Infinite outside the support hull, `-log P(X = y)` at its endpoints and
/// otherwise a golden-section search refined by Newton steps on `Λ'(x) = y`.
pub fn legendre(rf: &RateFunction, y: f64) -> Extended {
    let law = &rf.law;
    let (lo, hi) = (law.min(), law.max());
    let tol = 1e-12 * hi.max(1.0);
    if y < lo - tol || y > hi + tol {
        return Extended::PosInfinity;
    }
    let endpoint = |e: f64| {
        let p: f64 = law
            .support
            .iter()
            .zip(&law.probs)
            .filter(|(s, _)| **s == e)
            .map(|(_, p)| p)
            .sum();
        Extended::Finite(-p.ln())
    };
    if (y - lo).abs() <= tol {
        return endpoint(lo);
    }
    if (y - hi).abs() <= tol {
        return endpoint(hi);
    }
    // Bracket the maximizer through the monotone map x -> Λ'(x).
    let (mut a, mut b) = (-1.0, 1.0);
    while law.derivatives(a).0 > y {
        a *= 2.0;
    }
    while law.derivatives(b).0 < y {
        b *= 2.0;
    }
    let f = |x: f64| x * y - law.log_mgf(x);
    let (mut x, _) = golden_max(f, a, b, 200);
    for _ in 0..20 {
        let (m, v) = law.derivatives(x);
        if v <= 0.0 {
            break;
        }
        let step = (m - y) / v;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    Extended::Finite(f(x).max(0.0))
}

/// Infimum of the convex `Λ*` over `[a, b]`, attained at the point nearest the
/// mean.
fn inf_legendre(rf: &RateFunction, a: f64, b: f64) -> Extended {
    let m = rf.law.mean();
    match b {
        b if b.is_infinite() => legendre(rf, m.max(a)),
        b => legendre(rf, m.clamp(a, b)),
    }
}

/// Agents with risk aversion `γ_i`, impatience `ρ_i` and weight `λ_i`, each
/// receiving `ε_t/N` of a random-walk aggregate endowment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWalkEconomy {
    pub gammas: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Defaults to all ones.
    #[serde(default)]
    pub weights: Vec<f64>,
    pub law: IncrementLaw,
}

impl RandomWalkEconomy {
    pub fn new(
        gammas: Vec<f64>,
        rhos: Vec<f64>,
        weights: Option<Vec<f64>>,
        law: IncrementLaw,
    ) -> Result<Self> {
        let n = gammas.len();
        let e = RandomWalkEconomy {
            weights: weights.unwrap_or_else(|| vec![1.0; n]),
            gammas,
            rhos,
            law,
        };
        e.validate()?;
        Ok(e)
    }

    /// Checks shapes and signs, filling default weights.
    pub fn validate(&self) -> Result<()> {
        let n = self.gammas.len();
        if n == 0 {
            return Err(Error::InvalidInput(
                "an economy needs at least one agent".into(),
            ));
        }
        if self.rhos.len() != n {
            return Err(crate::error::dim("impatience rates", n, self.rhos.len()));
        }
        if !self.weights.is_empty() && self.weights.len() != n {
            return Err(crate::error::dim("weights", n, self.weights.len()));
        }
        if self.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidInput(
                "risk aversions must be positive".into(),
            ));
        }
        if self.rhos.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidInput(
                "impatience rates must be non-negative".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("weights must be positive".into()));
        }
        Ok(())
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(1.0)
    }

    fn level(&self, t: usize) -> Level {
        let lb = (0..self.gammas.len())
            .map(|i| self.gammas[i].ln() - self.weight(i).ln() - self.rhos[i] * t as f64)
            .collect();
        Level::from_log_beta(&self.gammas, lb)
    }

    fn inv_gamma_sum(&self) -> f64 {
        self.gammas.iter().map(|g| 1.0 / g).sum()
    }

    /// The tilt used by the exact pricer.
    pub fn tilt(&self) -> f64 {
        -1.0 / self.inv_gamma_sum()
    }

    /// `log ξ_t(ε)` of the clearing SPD, before normalization.
    pub fn log_xi(&self, t: usize, eps: f64) -> f64 {
        let level = self.level(t);
        level.log_xi(level.locate(eps), eps)
    }

    fn common_rho(&self) -> Option<f64> {
        let r = self.rhos[0];
        self.rhos.iter().all(|x| *x == r).then_some(r)
    }
}

/// Price and yield of the bond maturing at `t`, with `B^t = E[ξ_t]/ξ_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BondPoint {
    pub t: usize,
    pub log_price: f64,
    #[serde(rename = "yield")]
    pub yield_: f64,
}

/// Exact prices for every maturity in `ts` (any order, each at least 1).
pub fn bond_curve(econ: &RandomWalkEconomy, ts: &[usize]) -> Result<Vec<BondPoint>> {
    Ok(tilted_distributions(econ, ts)?
        .into_iter()
        .map(|(t, h, q)| {
            let log_price = log_price_from(econ, t, h, &q);
            BondPoint {
                t,
                log_price,
                yield_: -log_price / t as f64,
            }
        })
        .collect())
}

/// `B^t`. May underflow for long maturities; `bond_curve` keeps the logarithm.
pub fn bond_price(econ: &RandomWalkEconomy, t: usize) -> Result<f64> {
    Ok(bond_curve(econ, &[t])?[0].log_price.exp())
}

/// `Y(0, t) = -log(B^t)/t`.
pub fn bond_yield(econ: &RandomWalkEconomy, t: usize) -> Result<f64> {
    Ok(bond_curve(econ, &[t])?[0].yield_)
}

/// For each requested `t`: the lattice step and the tilted law of `ε_t` on
/// `{0, h, 2h, …}`.
fn tilted_distributions(
    econ: &RandomWalkEconomy,
    ts: &[usize],
) -> Result<Vec<(usize, f64, Vec<f64>)>> {
    econ.validate()?;
    if ts.contains(&0) {
        return Err(Error::InvalidInput("maturities must be at least 1".into()));
    }
    let Some(&t_max) = ts.iter().max() else {
        return Ok(Vec::new());
    };
    let (h, idx) = econ.law.lattice()?;
    let width = idx.iter().max().copied().unwrap_or(0);
    let points = t_max.saturating_mul(width).saturating_add(1);
    if points > LATTICE_CAP {
        return Err(Error::LatticeTooLarge {
            points,
            cap: LATTICE_CAP,
        });
    }
    let q = econ.law.tilted(econ.tilt());
    let mut dist = vec![1.0];
    let mut out: Vec<(usize, f64, Vec<f64>)> = Vec::with_capacity(ts.len());
    for t in 1..=t_max {
        let mut next = vec![0.0; dist.len() + width];
        for (n, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (&i, &qi) in idx.iter().zip(&q) {
                next[n + i] += p * qi;
            }
        }
        dist = next;
        if ts.contains(&t) {
            out.push((t, h, dist.clone()));
        }
    }
    let mut ordered = Vec::with_capacity(ts.len());
    for &t in ts {
        let d = out
            .iter()
            .find(|(s, _, _)| *s == t)
            .expect("every requested maturity is visited");
        ordered.push(d.clone());
    }
    Ok(ordered)
}

/// `log B^t = t Λ(θ) + log E^θ[ξ_t e^{-θ ε_t}] - log ξ_0`.
fn log_price_from(econ: &RandomWalkEconomy, t: usize, h: f64, q: &[f64]) -> f64 {
    let theta = econ.tilt();
    let level = econ.level(t);
    let exps: Vec<f64> = (0..q.len())
        .map(|n| {
            let eps = n as f64 * h;
            level.log_xi(level.locate(eps), eps) - theta * eps
        })
        .collect();
    t as f64 * econ.law.log_mgf(theta) + log_sum_exp(q, &exps) - econ.log_xi(0, 0.0)
}

/// `ρ - log E[exp(-X_1/Σ_l 1/γ_l)]`.
pub fn hetero_gamma_limit(gammas: &[f64], rho: f64, law: &IncrementLaw) -> f64 {
    let s: f64 = gammas.iter().map(|g| 1.0 / g).sum();
    rho - law.log_mgf(-1.0 / s)
}

/// `Y(0, t)` minus the heterogeneous-risk-aversion limit, for economies with
/// a common impatience rate.
///
/// On the regime where every agent consumes, `ξ_t e^{-θ ε_t}` does not depend
/// on `ε_t`, so the gap is `-(C_t + log1p(E^θ[R_t - 1]))/t` with `R_t = 1` on
/// that regime. Only the other regimes enter the expectation, which keeps the
/// gap accurate far below the yield's own rounding error.
pub fn gap_to_limit(econ: &RandomWalkEconomy, ts: &[usize]) -> Result<Vec<(usize, f64)>> {
    let Some(rho) = econ.common_rho() else {
        return Err(Error::Hypothesis(
            "the limit needs a common impatience rate".into(),
        ));
    };
    let theta = econ.tilt();
    let inv = econ.inv_gamma_sum();
    let log_xi0 = econ.log_xi(0, 0.0);
    Ok(tilted_distributions(econ, ts)?
        .into_iter()
        .map(|(t, h, q)| {
            let level = econ.level(t);
            // log(ξ_t e^{-θε}) on the full regime equals Σ_l log β_l/γ_l / Σ_l 1/γ_l.
            let full = level.log_xi(1, 0.0);
            let excess: f64 = q
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(n, p)| {
                    let eps = n as f64 * h;
                    p * (level.log_xi(level.locate(eps), eps) + eps / inv - full).exp_m1()
                })
                .sum();
            debug_assert!((theta + 1.0 / inv).abs() < 1e-15);
            let c = full + rho * t as f64 - log_xi0;
            (t, -(c + excess.ln_1p()) / t as f64)
        })
        .collect())
}

/// Smallest `t'` with `λ_1 e^{ρ_1 t} > … > λ_N e^{ρ_N t}` for every `t > t'`,
/// for agents listed by decreasing impatience.
pub fn ordering_threshold(econ: &RandomWalkEconomy) -> Result<usize> {
    econ.validate()?;
    let mut t = 0usize;
    for j in 0..econ.rhos.len().saturating_sub(1) {
        let dr = econ.rhos[j] - econ.rhos[j + 1];
        if !(dr > 0.0) {
            return Err(Error::Hypothesis(
                "impatience rates must be strictly decreasing".into(),
            ));
        }
        let ds = econ.weight(j + 1).ln() - econ.weight(j).ln();
        let bound = ds / dr;
        if bound >= 0.0 {
            t = t.max(bound.floor() as usize);
        }
    }
    Ok(t)
}

/// Long-run yield bounds for heterogeneous impatience with a common `γ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YieldBounds {
    /// `a_1..a_N`.
    pub a: Vec<Extended>,
    /// `b_2..b_N`.
    pub b: Vec<Extended>,
    pub lower: Extended,
    pub upper: Extended,
}

/// `a_j = ρ_j + inf Λ*` over `[L_j, U_j]` and `b_j = ρ_{j-1} + inf Λ*` over
/// `(L_j, U_j)`, with `L_j = Σ_{l>j}(ρ_j - ρ_l)/γ`, `U_j = Σ_{l≥j}(ρ_{j-1} - ρ_l)/γ`
/// and `U_1 = ∞`. By convexity of `Λ*` the infimum over the open interval is
/// the same as over its closure; a degenerate interval uses its single point.
pub fn yield_bounds(econ: &RandomWalkEconomy) -> Result<YieldBounds> {
    econ.validate()?;
    let gamma = econ.gammas[0];
    if econ.gammas.iter().any(|g| *g != gamma) {
        return Err(Error::Hypothesis(
            "yield bounds need a common risk aversion".into(),
        ));
    }
    let rho = &econ.rhos;
    let n = rho.len();
    if rho.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Hypothesis(
            "impatience rates must be strictly decreasing".into(),
        ));
    }
    let rf = RateFunction::new(econ.law.clone());
    let lower_end = |j: usize| (j + 1..n).map(|l| rho[j] - rho[l]).sum::<f64>() / gamma;
    let upper_end = |j: usize| (j..n).map(|l| rho[j - 1] - rho[l]).sum::<f64>() / gamma;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n.saturating_sub(1));
    a.push(inf_legendre(&rf, lower_end(0), f64::INFINITY).add(rho[0]));
    for j in 1..n {
        let inf = inf_legendre(&rf, lower_end(j), upper_end(j));
        a.push(inf.add(rho[j]));
        b.push(inf.add(rho[j - 1]));
    }
    let lower = a.iter().copied().fold(Extended::PosInfinity, Extended::min);
    let upper = b.iter().copied().fold(Extended::PosInfinity, Extended::min);
    assert!(
        lower.le(upper),
        "lower bound {lower:?} exceeds upper bound {upper:?}"
    );
    Ok(YieldBounds { a, b, lower, upper })
}

/// Monte Carlo estimate of `B^t` with its standard error, both relative to the
/// estimate so that they stay representable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub t: usize,
    pub paths: usize,
    pub log_price: f64,
    /// Standard error divided by the estimate.
    pub rel_std_error: f64,
}

impl McEstimate {
    /// Distance from an exact log price, in standard errors.
    pub fn z_score(&self, exact_log_price: f64) -> f64 {
        (exact_log_price - self.log_price).exp_m1().abs() / self.rel_std_error
    }
}

/// Samples `ε_t` by drawing increments. With `tilt` the increments are drawn
/// under `e^{θX}` with `θ` half the pricer's tilt and reweighted by the
/// likelihood ratio; without it the plain law is used.
pub fn monte_carlo_price(
    econ: &RandomWalkEconomy,
    t: usize,
    paths: usize,
    seed: u64,
    tilt: bool,
) -> Result<McEstimate> {
    econ.validate()?;
    if t == 0 || paths < 2 {
        return Err(Error::InvalidInput(
            "need t ≥ 1 and at least two paths".into(),
        ));
    }
    let theta = if tilt { 0.5 * econ.tilt() } else { 0.0 };
    let q = econ.law.tilted(theta);
    let dist = WeightedIndex::new(&q).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = econ.level(t);
    let shift = t as f64 * econ.law.log_mgf(theta) - econ.log_xi(0, 0.0);
    let logs: Vec<f64> = (0..paths)
        .map(|_| {
            let eps: f64 = (0..t)
                .map(|_| econ.law.support[dist.sample(&mut rng)])
                .sum();
            level.log_xi(level.locate(eps), eps) - theta * eps
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let n = paths as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        t,
        paths,
        log_price: m + mean.ln() + shift,
        rel_std_error: (var / n).sqrt() / mean,
    })
}
