//! Markets on a tree: traded instruments, state price densities and the
//! aggregate SPD of an incomplete market.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::numeric::{lstsq, range_basis};
use crate::probtree::{AdaptedProcess, SubAlgebra, Tree, TreeSpec};

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Declared wealth space for one period.
#[derive(Debug, Clone, PartialEq)]
pub enum WealthSpace {
    /// Span of the traded payoffs.
    Span,
    /// `L²(H_k)` for a sub-algebra of `F_k` (type-C market).
    Blocks(SubAlgebra),
}

/// A traded instrument: the bond or one of the risky assets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrument {
    Bond,
    Asset(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketSpec {
    tree: Tree,
    assets: Vec<AdaptedProcess>,
    rate: Vec<Vec<f64>>,
    wealth: Vec<WealthSpace>,
}

/// Serialized wealth space: `"span"` or `{"blocks": [block label per node]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WealthConfig {
    Span,
    Blocks(Vec<usize>),
}

/// Serialized market. Missing rates default to zero and missing wealth
/// spaces to the span of the traded payoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub tree: TreeSpec,
    #[serde(default)]
    pub assets: Vec<AdaptedProcess>,
    #[serde(default)]
    pub rate: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub wealth: Option<Vec<WealthConfig>>,
}

impl MarketConfig {
    pub fn build(&self) -> Result<MarketSpec> {
        let tree = self.tree.build()?;
        let t = tree.horizon();
        let rate = self
            .rate
            .clone()
            .unwrap_or_else(|| (0..t).map(|k| vec![0.0; tree.width(k)]).collect());
        let wealth = match &self.wealth {
            None => vec![WealthSpace::Span; t],
            Some(w) => w
                .iter()
                .enumerate()
                .map(|(i, w)| match w {
                    WealthConfig::Span => Ok(WealthSpace::Span),
                    WealthConfig::Blocks(b) => Ok(WealthSpace::Blocks(SubAlgebra::new(
                        &tree,
                        i + 1,
                        b.clone(),
                    )?)),
                })
                .collect::<Result<Vec<_>>>()?,
        };
        MarketSpec::new(tree, self.assets.clone(), rate, wealth)
    }
}

/// Instruments available at one node, reduced to an orthonormal payoff basis.
#[derive(Debug, Clone)]
pub struct NodeBasis {
    /// Payoffs on the children (rows) of the basis portfolios (columns).
    pub payoff: DMatrix<f64>,
    /// Cost at the node of each basis portfolio.
    pub cost: DVector<f64>,
    /// Maps basis coordinates to minimum-norm holdings `(bond, asset_1, ..)`.
    pub to_holdings: DMatrix<f64>,
}

impl MarketSpec {
    /// `rate[k][u]` is the interest paid on the children of node `u` at level `k`.
    /// `wealth[k - 1]` describes the wealth space at level `k`.
    pub fn new(
        tree: Tree,
        assets: Vec<AdaptedProcess>,
        rate: Vec<Vec<f64>>,
        wealth: Vec<WealthSpace>,
    ) -> Result<Self> {
        let t = tree.horizon();
        for (j, s) in assets.iter().enumerate() {
            s.check_shape(&tree)?;
            if let Some((k, v, x)) = s.iter().find(|&(_, _, x)| !(x >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "asset {j} has negative or non-finite price {x} at level {k}, node {v}"
                )));
            }
        }
        if rate.len() != t {
            return Err(dim("rate levels", t, rate.len()));
        }
        for (k, level) in rate.iter().enumerate() {
            if level.len() != tree.width(k) {
                return Err(dim(
                    format!("rates on level {k}"),
                    tree.width(k),
                    level.len(),
                ));
            }
            if let Some((u, r)) = level.iter().enumerate().find(|(_, r)| !(**r >= -1e-12)) {
                return Err(Error::InvalidInput(format!(
                    "negative interest rate {r} after level {k}, node {u}"
                )));
            }
        }
        if wealth.len() != t {
            return Err(dim("wealth spaces", t, wealth.len()));
        }
        for (i, w) in wealth.iter().enumerate() {
            let k = i + 1;
            if let WealthSpace::Blocks(h) = w {
                if h.level() != k || h.block_ids().len() != tree.width(k) {
                    return Err(Error::NotACoarsening {
                        level: k,
                        reason: format!("wealth space declared on level {}", h.level()),
                    });
                }
                if !h.refines_previous(&tree) {
                    return Err(Error::NotACoarsening {
                        level: k,
                        reason: "a block straddles two parents, so F_{k-1} is not contained in H_k"
                            .into(),
                    });
                }
                for (j, s) in assets.iter().enumerate() {
                    if !h.is_measurable(s.level(k), 1e-12) {
                        return Err(Error::InvalidInput(format!(
                            "asset {j} is not H-measurable at level {k}"
                        )));
                    }
                }
            }
        }
        Ok(MarketSpec {
            tree,
            assets,
            rate,
            wealth,
        })
    }

    /// A market with only the bond.
    pub fn bond_only(tree: Tree, rate: Vec<Vec<f64>>) -> Result<Self> {
        let t = tree.horizon();
        Self::new(tree, Vec::new(), rate, vec![WealthSpace::Span; t])
    }

    /// Assets paying `payoffs[j]` at the horizon, priced under `xi`, together with
    /// the bond implied by `xi`.
    pub fn priced_under(tree: Tree, xi: &AdaptedProcess, payoffs: &[Vec<f64>]) -> Result<Self> {
        xi.check_shape(&tree)?;
        let t = tree.horizon();
        let rate = implied_rates(&tree, xi)?;
        let mut assets = Vec::with_capacity(payoffs.len());
        for d in payoffs {
            if d.len() != tree.width(t) {
                return Err(dim("terminal payoff", tree.width(t), d.len()));
            }
            let mut levels = vec![Vec::new(); t + 1];
            levels[t] = d.clone();
            let mut deflated: Vec<f64> = d.iter().zip(xi.level(t)).map(|(a, b)| a * b).collect();
            for k in (0..t).rev() {
                deflated = tree.cond_expect_next(k, &deflated);
                levels[k] = deflated
                    .iter()
                    .zip(xi.level(k))
                    .map(|(a, b)| a / b)
                    .collect();
            }
            assets.push(AdaptedProcess::new(&tree, levels)?);
        }
        Self::new(tree, assets, rate, vec![WealthSpace::Span; t])
    }

    /// Complete market: one terminal Arrow claim per leaf, priced under `xi`.
    pub fn complete_under(tree: Tree, xi: &AdaptedProcess) -> Result<Self> {
        let t = tree.horizon();
        let leaves = tree.width(t);
        let payoffs: Vec<Vec<f64>> = (0..leaves)
            .map(|l| {
                (0..leaves)
                    .map(|v| if v == l { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::priced_under(tree, xi, &payoffs)
    }

    /// One-period type-C market with `L_1 = L²(H_1)`.
    ///
    /// `kernel` is a positive `H_1`-measurable level-1 vector; it is rescaled so
    /// that it prices the bond paying `rate`, and one claim per block of `h`
    /// is traded at its price under the rescaled kernel.
    pub fn type_c_one_period(tree: Tree, h: SubAlgebra, kernel: &[f64], rate: f64) -> Result<Self> {
        if tree.horizon() != 1 {
            return Err(Error::InvalidInput(
                "one-period market needs a tree with T = 1".into(),
            ));
        }
        if kernel.len() != tree.width(1) {
            return Err(dim("kernel", tree.width(1), kernel.len()));
        }
        if kernel.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidInput(
                "kernel must be strictly positive".into(),
            ));
        }
        if !h.is_measurable(kernel, 1e-12) {
            return Err(Error::InvalidInput("kernel is not H-measurable".into()));
        }
        let scale = 1.0 / ((1.0 + rate) * tree.expect(1, kernel));
        let m1: Vec<f64> = kernel.iter().map(|m| m * scale).collect();
        let mut assets = Vec::with_capacity(h.n_blocks());
        for block in h.blocks() {
            let mut payoff = vec![0.0; tree.width(1)];
            for &v in &block {
                payoff[v] = 1.0;
            }
            let price: f64 = block.iter().map(|&v| tree.prob(1, v) * m1[v]).sum();
            assets.push(AdaptedProcess::new(&tree, vec![vec![price], payoff])?);
        }
        Self::new(tree, assets, vec![vec![rate]], vec![WealthSpace::Blocks(h)])
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn assets(&self) -> &[AdaptedProcess] {
        &self.assets
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    /// `r_{k+1}` on the children of node `u` at level `k`.
    pub fn rate(&self, k: usize, u: usize) -> f64 {
        self.rate[k][u]
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rate
    }

    /// Wealth space at level `k >= 1`.
    pub fn wealth_space(&self, k: usize) -> &WealthSpace {
        &self.wealth[k - 1]
    }

    /// Payoff matrix on the children of `u` (columns: bond, then assets) and
    /// the vector of prices at `u`.
    pub fn instruments(&self, k: usize, u: usize) -> (DMatrix<f64>, DVector<f64>) {
        let ch = self.tree.children(k, u);
        let n = self.assets.len();
        let mut f = DMatrix::zeros(ch.len(), n + 1);
        let mut p = DVector::zeros(n + 1);
        p[0] = 1.0;
        for (row, c) in ch.enumerate() {
            f[(row, 0)] = 1.0 + self.rate[k][u];
            for (j, s) in self.assets.iter().enumerate() {
                f[(row, j + 1)] = s.get(k + 1, c);
            }
        }
        for (j, s) in self.assets.iter().enumerate() {
            p[j + 1] = s.get(k, u);
        }
        (f, p)
    }

    /// Orthonormal basis of the payoffs reachable from node `u` at level `k`.
    pub fn basis(&self, k: usize, u: usize) -> NodeBasis {
        let (f, p) = self.instruments(k, u);
        let rb = range_basis(&f, RANK_TOL);
        let cost = rb.v_sinv.transpose() * p;
        NodeBasis {
            payoff: rb.u,
            cost,
            to_holdings: rb.v_sinv,
        }
    }

    /// Whether every node's instruments span all payoffs on its children.
    pub fn is_complete(&self) -> bool {
        (0..self.tree.horizon()).all(|k| {
            (0..self.tree.width(k))
                .all(|u| self.basis(k, u).payoff.ncols() == self.tree.children(k, u).len())
        })
    }
}

/// `1 + r_{k+1} = ξ_k / E[ξ_{k+1} | F_k]` per parent node.
pub fn implied_rates(tree: &Tree, xi: &AdaptedProcess) -> Result<Vec<Vec<f64>>> {
    xi.check_shape(tree)?;
    Ok((0..tree.horizon())
        .map(|k| {
            tree.cond_expect_next(k, xi.level(k + 1))
                .iter()
                .zip(xi.level(k))
                .map(|(e, x)| x / e - 1.0)
                .collect()
        })
        .collect())
}

/// Strictly positive state price density with `ξ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Spd(AdaptedProcess);

impl Spd {
    pub fn new(tree: &Tree, xi: AdaptedProcess) -> Result<Self> {
        xi.check_shape(tree)?;
        if let Some((k, v, x)) = xi.iter().find(|&(_, _, x)| !(x > 0.0 && x.is_finite())) {
            return Err(Error::NonPositiveKernel {
                level: k,
                node: v,
                value: x,
            });
        }
        if (xi.get(0, 0) - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "state price density is not normalized: xi_0 = {}",
                xi.get(0, 0)
            )));
        }
        Ok(Spd(xi))
    }

    /// Divides by the root value before validating.
    pub fn normalized(tree: &Tree, xi: AdaptedProcess) -> Result<Self> {
        let x0 = xi.get(0, 0);
        if !(x0 > 0.0) {
            return Err(Error::NonPositiveKernel {
                level: 0,
                node: 0,
                value: x0,
            });
        }
        Self::new(tree, xi.map(|_, _, x| x / x0))
    }

    /// `ξ ≡ 1`.
    pub fn unit(tree: &Tree) -> Self {
        Spd(AdaptedProcess::constant(tree, 1.0))
    }

    pub fn process(&self) -> &AdaptedProcess {
        &self.0
    }

    pub fn into_process(self) -> AdaptedProcess {
        self.0
    }

    pub fn get(&self, k: usize, v: usize) -> f64 {
        self.0.get(k, v)
    }

    pub fn level(&self, k: usize) -> &[f64] {
        self.0.level(k)
    }
}

/// Worst pricing-identity violation of a candidate SPD.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpdReport {
    pub max_residual: f64,
    /// `(level, node, instrument)` where the largest residual occurs.
    pub location: Option<(usize, usize, Instrument)>,
    pub normalization: f64,
    pub min_value: f64,
    pub pass: bool,
}

/// Checks `S_k ξ_k = E[S_{k+1} ξ_{k+1} | F_k]` for every asset and
/// `ξ_k = E[ξ_{k+1}(1 + r_{k+1}) | F_k]` for the bond.
pub fn verify_spd(m: &MarketSpec, xi: &AdaptedProcess, tol: f64) -> Result<SpdReport> {
    let tree = &m.tree;
    xi.check_shape(tree)?;
    let mut worst = 0.0;
    let mut location = None;
    let mut record = |r: f64, loc: (usize, usize, Instrument)| {
        if r > worst || (location.is_none() && r >= worst) {
            worst = r;
            location = Some(loc);
        }
    };
    for k in 0..tree.horizon() {
        for u in 0..tree.width(k) {
            let r = m.rate[k][u];
            let e: f64 = tree
                .children(k, u)
                .map(|c| tree.cond_prob(k + 1, c) * xi.get(k + 1, c) * (1.0 + r))
                .sum();
            record((xi.get(k, u) - e).abs(), (k, u, Instrument::Bond));
            for (j, s) in m.assets.iter().enumerate() {
                let e: f64 = tree
                    .children(k, u)
                    .map(|c| tree.cond_prob(k + 1, c) * xi.get(k + 1, c) * s.get(k + 1, c))
                    .sum();
                record(
                    (s.get(k, u) * xi.get(k, u) - e).abs(),
                    (k, u, Instrument::Asset(j)),
                );
            }
        }
    }
    let normalization = (xi.get(0, 0) - 1.0).abs();
    let min_value = xi.min_value();
    Ok(SpdReport {
        max_residual: worst,
        location,
        normalization,
        min_value,
        pass: worst <= tol && normalization <= tol && min_value > 0.0,
    })
}

/// Largest number of vertex candidates examined per node by the arbitrage check.
pub const VERTEX_CAP: usize = 200_000;

/// Fails with [`Error::Arbitrage`] unless every node admits strictly positive
/// one-period state prices.
pub fn check_no_arbitrage(m: &MarketSpec) -> Result<()> {
    for k in 0..m.tree.horizon() {
        for u in 0..m.tree.width(k) {
            if !node_has_positive_state_prices(m, k, u)? {
                return Err(Error::Arbitrage { level: k, node: u });
            }
        }
    }
    Ok(())
}

fn node_has_positive_state_prices(m: &MarketSpec, k: usize, u: usize) -> Result<bool> {
    let (f, p) = m.instruments(k, u);
    let ft = f.transpose();
    let n_children = f.nrows();
    let rb = range_basis(&ft, RANK_TOL);
    let r = rb.rank;
    let scale = p.amax().max(1.0);
    if r == n_children {
        let (pi, res) = lstsq(&ft, &p, RANK_TOL);
        return Ok(res <= 1e-9 * scale && pi.iter().all(|&x| x > 0.0));
    }
    let mut covered = vec![false; n_children];
    let mut examined = 0usize;
    let mut any = false;
    let mut subset: Vec<usize> = (0..r).collect();
    loop {
        examined += 1;
        if examined > VERTEX_CAP {
            return Err(Error::InvalidInput(format!(
                "arbitrage check at level {k}, node {u} exceeds {VERTEX_CAP} vertex candidates"
            )));
        }
        let sub = ft.select_columns(&subset);
        if crate::numeric::rank(&sub, RANK_TOL) == r {
            let (x, res) = lstsq(&sub, &p, RANK_TOL);
            if res <= 1e-9 * scale && x.iter().all(|&v| v >= -1e-12) {
                any = true;
                for (i, &c) in subset.iter().enumerate() {
                    if x[i] > 1e-12 {
                        covered[c] = true;
                    }
                }
                if covered.iter().all(|&c| c) {
                    return Ok(true);
                }
            }
        }
        if !next_combination(&mut subset, n_children) {
            break;
        }
    }
    Ok(any && covered.iter().all(|&c| c))
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let r = idx.len();
    if r == 0 {
        return false;
    }
    let mut i = r;
    while i > 0 {
        i -= 1;
        if idx[i] < n - r + i {
            idx[i] += 1;
            for j in i + 1..r {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// The unique normalized SPD with `M_k` in the wealth space of every period.
pub fn aggregate_spd(m: &MarketSpec) -> Result<Spd> {
    check_no_arbitrage(m)?;
    let tree = &m.tree;
    let mut levels = vec![vec![1.0]];
    for k in 0..tree.horizon() {
        let mut next = vec![0.0; tree.width(k + 1)];
        for u in 0..tree.width(k) {
            let ratios = one_period_kernel(m, k, u)?;
            for (c, q) in tree.children(k, u).zip(ratios) {
                if !(q > 0.0) {
                    return Err(Error::NonPositiveKernel {
                        level: k + 1,
                        node: c,
                        value: q,
                    });
                }
                next[c] = levels[k][u] * q;
            }
        }
        levels.push(next);
    }
    Spd::new(tree, AdaptedProcess::new(tree, levels)?)
}

/// `M_{k+1} / M_k` on the children of `u`.
fn one_period_kernel(m: &MarketSpec, k: usize, u: usize) -> Result<Vec<f64>> {
    let tree = &m.tree;
    let ch = tree.children(k, u);
    let q: Vec<f64> = ch.clone().map(|c| tree.cond_prob(k + 1, c)).collect();
    let (f, p) = m.instruments(k, u);
    let scale = p.amax().max(1.0);
    // Pricing equations: Σ_v q_v m_v F[v, j] = p_j, with m restricted to the
    // wealth space through a parametrization m = G a.
    let g = match &m.wealth[k] {
        WealthSpace::Span => range_basis(&f, RANK_TOL).u,
        WealthSpace::Blocks(h) => {
            let mut ids: Vec<usize> = ch.clone().map(|c| h.block_of(c)).collect();
            ids.sort_unstable();
            ids.dedup();
            let mut g = DMatrix::zeros(ch.len(), ids.len());
            for (row, c) in ch.clone().enumerate() {
                let col = ids.binary_search(&h.block_of(c)).expect("block id");
                g[(row, col)] = 1.0;
            }
            g
        }
    };
    let weighted = DMatrix::from_fn(ch.len(), g.ncols(), |r, c| q[r] * g[(r, c)]);
    let system = f.transpose() * weighted;
    let needed = g.ncols();
    let rank = crate::numeric::rank(&system, RANK_TOL);
    if rank < needed {
        return Err(Error::NotUnique {
            level: k,
            node: u,
            rank,
            needed,
        });
    }
    let (a, res) = lstsq(&system, &p, RANK_TOL);
    if res > 1e-9 * scale {
        return Err(Error::Infeasible {
            level: k,
            node: u,
            residual: res,
        });
    }
    Ok((g * a).iter().copied().collect())
}

/// Largest distance of `x` (level `k`) from the wealth space `L_k`, measured
/// nodewise after orthogonal projection.
pub fn wealth_space_residual(m: &MarketSpec, k: usize, x: &[f64]) -> f64 {
    let tree = &m.tree;
    let mut worst: f64 = 0.0;
    for u in 0..tree.width(k - 1) {
        let ch = tree.children(k - 1, u);
        let y: Vec<f64> = ch.clone().map(|c| x[c]).collect();
        let q: Vec<f64> = ch.clone().map(|c| tree.cond_prob(k, c)).collect();
        let proj = project_weighted(&m.basis(k - 1, u).payoff, &q, &y);
        for (a, b) in proj.iter().zip(&y) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Orthogonal projection of `y` onto the columns of `g` in the inner product
/// weighted by `q`.
pub fn project_weighted(g: &DMatrix<f64>, q: &[f64], y: &[f64]) -> Vec<f64> {
    if g.ncols() == 0 {
        return vec![0.0; y.len()];
    }
    let sq: Vec<f64> = q.iter().map(|w| w.sqrt()).collect();
    let gw = DMatrix::from_fn(g.nrows(), g.ncols(), |r, c| sq[r] * g[(r, c)]);
    let yw = DVector::from_iterator(y.len(), y.iter().zip(&sq).map(|(a, s)| a * s));
    let (a, _) = lstsq(&gw, &yw, RANK_TOL);
    (g * a).iter().copied().collect()
}
