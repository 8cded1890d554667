//! Finite filtered probability spaces.
//!
//! A [`Tree`] stores the partitions generating the filtration `F_0 ⊆ F_1 ⊆ ... ⊆ F_T`
//! as levels of nodes. Node ids are dense per level and the children of any node
//! occupy a contiguous id range on the next level, so every adapted quantity is a
//! plain `Vec<f64>` per level.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

/// Per-level tolerance on probability normalization.
pub const PROB_TOL: f64 = 1e-12;

/// Finite filtration with node probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    prob: Vec<Vec<f64>>,
    parent: Vec<Vec<usize>>,
    children: Vec<Vec<Range<usize>>>,
}

/// Serialized branching description: `conditional[k][u]` lists the conditional
/// probabilities of the children of node `u` at level `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub conditional: Vec<Vec<Vec<f64>>>,
}

impl TreeSpec {
    pub fn build(&self) -> Result<Tree> {
        Tree::from_conditional(&self.conditional)
    }
}

impl Tree {
    /// The trivial space with a single node and `T = 0`.
    pub fn trivial() -> Self {
        Tree {
            prob: vec![vec![1.0]],
            parent: vec![Vec::new()],
            children: Vec::new(),
        }
    }

    /// Builds a tree from conditional branching probabilities.
    pub fn from_conditional(conditional: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut prob = vec![vec![1.0]];
        let mut parent = vec![Vec::new()];
        let mut children = Vec::with_capacity(conditional.len());
        for (k, level) in conditional.iter().enumerate() {
            let width = prob[k].len();
            if level.len() != width {
                return Err(dim(
                    format!("branching list for level {k}"),
                    width,
                    level.len(),
                ));
            }
            let mut next_prob = Vec::new();
            let mut next_parent = Vec::new();
            let mut ranges = Vec::with_capacity(width);
            for (u, probs) in level.iter().enumerate() {
                if probs.is_empty() {
                    return Err(Error::ChildlessNode { level: k, node: u });
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::NotNormalized {
                        level: k,
                        node: u,
                        sum,
                    });
                }
                let start = next_prob.len();
                for &p in probs {
                    if !(p > 0.0) {
                        return Err(Error::NonPositiveProbability {
                            level: k + 1,
                            node: next_prob.len(),
                            prob: p,
                        });
                    }
                    next_prob.push(prob[k][u] * p);
                    next_parent.push(u);
                }
                ranges.push(start..next_prob.len());
            }
            prob.push(next_prob);
            parent.push(next_parent);
            children.push(ranges);
        }
        Ok(Tree {
            prob,
            parent,
            children,
        })
    }

    /// Same branching factor and conditional probabilities at every node.
    pub fn uniform(branch_probs: &[f64], horizon: usize) -> Result<Self> {
        let mut conditional = Vec::with_capacity(horizon);
        let mut width = 1;
        for _ in 0..horizon {
            conditional.push(vec![branch_probs.to_vec(); width]);
            width *= branch_probs.len();
        }
        Self::from_conditional(&conditional)
    }

    /// Builds a tree from explicit parent pointers and absolute node probabilities.
    ///
    /// `parents[k]` lists the parent of every node at level `k + 1`; parents must be
    /// non-decreasing so that siblings are contiguous.
    pub fn from_parents(parents: &[Vec<usize>], probs: &[Vec<f64>]) -> Result<Self> {
        if probs.len() != parents.len() + 1 {
            return Err(dim("probability levels", parents.len() + 1, probs.len()));
        }
        if probs[0].len() != 1 {
            return Err(Error::InvalidInput(
                "level 0 must have exactly one node".into(),
            ));
        }
        for (k, level) in probs.iter().enumerate() {
            for (v, &p) in level.iter().enumerate() {
                if !(p > 0.0) {
                    return Err(Error::NonPositiveProbability {
                        level: k,
                        node: v,
                        prob: p,
                    });
                }
            }
            let total: f64 = level.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::NotNormalized {
                    level: k,
                    node: 0,
                    sum: total,
                });
            }
        }
        let mut children = Vec::with_capacity(parents.len());
        let mut parent = vec![Vec::new()];
        for (k, par) in parents.iter().enumerate() {
            let width = probs[k].len();
            if par.len() != probs[k + 1].len() {
                return Err(dim(
                    format!("parents of level {}", k + 1),
                    probs[k + 1].len(),
                    par.len(),
                ));
            }
            let mut ranges = vec![0..0; width];
            let mut mass = vec![0.0; width];
            let mut prev = 0;
            for (v, &u) in par.iter().enumerate() {
                if u >= width {
                    return Err(Error::OrphanNode {
                        level: k + 1,
                        node: v,
                    });
                }
                if u < prev {
                    return Err(Error::InvalidInput(format!(
                        "parents of level {} must be non-decreasing",
                        k + 1
                    )));
                }
                prev = u;
                if ranges[u].is_empty() {
                    ranges[u] = v..v + 1;
                } else {
                    ranges[u].end = v + 1;
                }
                mass[u] += probs[k + 1][v];
            }
            for u in 0..width {
                if ranges[u].is_empty() {
                    return Err(Error::ChildlessNode { level: k, node: u });
                }
                if (mass[u] - probs[k][u]).abs() > PROB_TOL {
                    return Err(Error::NotNormalized {
                        level: k,
                        node: u,
                        sum: mass[u] / probs[k][u],
                    });
                }
            }
            parent.push(par.clone());
            children.push(ranges);
        }
        Ok(Tree {
            prob: probs.to_vec(),
            parent,
            children,
        })
    }

    /// The horizon `T`.
    pub fn horizon(&self) -> usize {
        self.prob.len() - 1
    }

    /// Number of nodes at level `k`.
    pub fn width(&self, k: usize) -> usize {
        self.prob[k].len()
    }

    pub fn total_nodes(&self) -> usize {
        self.prob.iter().map(Vec::len).sum()
    }

    pub fn prob(&self, k: usize, v: usize) -> f64 {
        self.prob[k][v]
    }

    pub fn probs(&self, k: usize) -> &[f64] {
        &self.prob[k]
    }

    /// Parent of node `v` at level `k >= 1`.
    pub fn parent(&self, k: usize, v: usize) -> usize {
        self.parent[k][v]
    }

    /// Children of node `u` at level `k < T`, as ids on level `k + 1`.
    pub fn children(&self, k: usize, u: usize) -> Range<usize> {
        self.children[k][u].clone()
    }

    /// `P(child | parent)` for node `v` at level `k >= 1`.
    pub fn cond_prob(&self, k: usize, v: usize) -> f64 {
        self.prob[k][v] / self.prob[k - 1][self.parent[k][v]]
    }

    /// The level-`j` ancestor of node `v` at level `k >= j`.
    pub fn ancestor(&self, k: usize, v: usize, j: usize) -> usize {
        let mut node = v;
        for level in (j + 1..=k).rev() {
            node = self.parent[level][node];
        }
        node
    }

    fn check_level(&self, k: usize, x: &[f64]) -> Result<()> {
        if k > self.horizon() {
            return Err(Error::InvalidInput(format!(
                "level {k} beyond horizon {}",
                self.horizon()
            )));
        }
        if x.len() != self.width(k) {
            return Err(dim(
                format!("random variable on level {k}"),
                self.width(k),
                x.len(),
            ));
        }
        Ok(())
    }

    /// `E[X]` for `X` measurable w.r.t. level `k`.
    pub fn expect(&self, k: usize, x: &[f64]) -> f64 {
        self.prob[k].iter().zip(x).map(|(p, v)| p * v).sum()
    }

    /// `E[X | F_k]` for `X` on level `k + 1`.
    pub fn cond_expect_next(&self, k: usize, x: &[f64]) -> Vec<f64> {
        (0..self.width(k))
            .map(|u| {
                let s: f64 = self
                    .children(k, u)
                    .map(|c| self.prob[k + 1][c] * x[c])
                    .sum();
                s / self.prob[k][u]
            })
            .collect()
    }

    /// Block-wise conditional expectation `E[X | G]` on level `k`.
    pub fn cond_expect(&self, k: usize, x: &[f64], g: &SubAlgebra) -> Result<Vec<f64>> {
        self.check_level(k, x)?;
        g.check_against(self, k)?;
        let mut mass = vec![0.0; g.n_blocks];
        let mut acc = vec![0.0; g.n_blocks];
        for (v, &b) in g.block_of.iter().enumerate() {
            mass[b] += self.prob[k][v];
            acc[b] += self.prob[k][v] * x[v];
        }
        Ok(g.block_of.iter().map(|&b| acc[b] / mass[b]).collect())
    }

    /// Block-wise minimum of `X` over `G` on level `k`.
    pub fn ess_inf(&self, k: usize, x: &[f64], g: &SubAlgebra) -> Result<Vec<f64>> {
        self.check_level(k, x)?;
        g.check_against(self, k)?;
        let mut lo = vec![f64::INFINITY; g.n_blocks];
        for (v, &b) in g.block_of.iter().enumerate() {
            lo[b] = lo[b].min(x[v]);
        }
        Ok(g.block_of.iter().map(|&b| lo[b]).collect())
    }
}

/// Real value per node of every level `0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdaptedProcess {
    values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn new(tree: &Tree, values: Vec<Vec<f64>>) -> Result<Self> {
        let p = AdaptedProcess { values };
        p.check_shape(tree)?;
        Ok(p)
    }

    pub fn from_fn(tree: &Tree, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let values = (0..=tree.horizon())
            .map(|k| (0..tree.width(k)).map(|v| f(k, v)).collect())
            .collect();
        AdaptedProcess { values }
    }

    pub fn constant(tree: &Tree, c: f64) -> Self {
        Self::from_fn(tree, |_, _| c)
    }

    pub fn zeros(tree: &Tree) -> Self {
        Self::constant(tree, 0.0)
    }

    pub fn check_shape(&self, tree: &Tree) -> Result<()> {
        if self.values.len() != tree.horizon() + 1 {
            return Err(dim("process levels", tree.horizon() + 1, self.values.len()));
        }
        for (k, level) in self.values.iter().enumerate() {
            if level.len() != tree.width(k) {
                return Err(dim(
                    format!("process values on level {k}"),
                    tree.width(k),
                    level.len(),
                ));
            }
        }
        Ok(())
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k]
    }

    pub fn get(&self, k: usize, v: usize) -> f64 {
        self.values[k][v]
    }

    pub fn set(&mut self, k: usize, v: usize, value: f64) {
        self.values[k][v] = value;
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn into_levels(self) -> Vec<Vec<f64>> {
        self.values
    }

    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, l)| l.iter().enumerate().map(|(v, &x)| f(k, v, x)).collect())
            .collect();
        AdaptedProcess { values }
    }

    pub fn zip_with(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        AdaptedProcess { values }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .flat_map(|(k, l)| l.iter().enumerate().map(move |(v, &x)| (k, v, x)))
    }

    /// Largest absolute nodewise difference.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|((_, _, a), (_, _, b))| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.iter().map(|(_, _, x)| x).fold(f64::INFINITY, f64::min)
    }
}

/// A sub-sigma-algebra of `F_k`, given as a partition of the level-`k` nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubAlgebra {
    level: usize,
    block_of: Vec<usize>,
    n_blocks: usize,
}

impl SubAlgebra {
    pub fn new(tree: &Tree, level: usize, block_of: Vec<usize>) -> Result<Self> {
        if level > tree.horizon() {
            return Err(Error::NotACoarsening {
                level,
                reason: "level beyond horizon".into(),
            });
        }
        let n_blocks = block_of.iter().max().map_or(0, |m| m + 1);
        let g = SubAlgebra {
            level,
            block_of,
            n_blocks,
        };
        g.check_against(tree, level)?;
        Ok(g)
    }

    pub fn from_blocks(tree: &Tree, level: usize, blocks: &[Vec<usize>]) -> Result<Self> {
        if level > tree.horizon() {
            return Err(Error::NotACoarsening {
                level,
                reason: "level beyond horizon".into(),
            });
        }
        let mut block_of = vec![usize::MAX; tree.width(level)];
        for (b, nodes) in blocks.iter().enumerate() {
            for &v in nodes {
                if v >= block_of.len() || block_of[v] != usize::MAX {
                    return Err(Error::NotACoarsening {
                        level,
                        reason: format!("node {v} is out of range or listed twice"),
                    });
                }
                block_of[v] = b;
            }
        }
        if block_of.contains(&usize::MAX) {
            return Err(Error::NotACoarsening {
                level,
                reason: "blocks do not cover every node".into(),
            });
        }
        Self::new(tree, level, block_of)
    }

    /// `G = F_k`.
    pub fn finest(tree: &Tree, level: usize) -> Self {
        SubAlgebra {
            level,
            block_of: (0..tree.width(level)).collect(),
            n_blocks: tree.width(level),
        }
    }

    /// `G = F_0`, seen on level `k`.
    pub fn trivial(tree: &Tree, level: usize) -> Self {
        SubAlgebra {
            level,
            block_of: vec![0; tree.width(level)],
            n_blocks: 1,
        }
    }

    /// Blocks given by the level-`j` ancestors, i.e. `F_j` seen on level `k`.
    pub fn from_ancestors(tree: &Tree, level: usize, j: usize) -> Self {
        let block_of = (0..tree.width(level))
            .map(|v| tree.ancestor(level, v, j))
            .collect();
        SubAlgebra {
            level,
            block_of,
            n_blocks: tree.width(j),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block_of(&self, v: usize) -> usize {
        self.block_of[v]
    }

    pub fn block_ids(&self) -> &[usize] {
        &self.block_of
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_blocks];
        for (v, &b) in self.block_of.iter().enumerate() {
            out[b].push(v);
        }
        out
    }

    fn check_against(&self, tree: &Tree, k: usize) -> Result<()> {
        if self.level != k {
            return Err(Error::NotACoarsening {
                level: k,
                reason: format!("sub-algebra lives on level {}", self.level),
            });
        }
        if self.block_of.len() != tree.width(k) {
            return Err(Error::NotACoarsening {
                level: k,
                reason: format!(
                    "{} nodes labelled, level has {}",
                    self.block_of.len(),
                    tree.width(k)
                ),
            });
        }
        let mut used = vec![false; self.n_blocks];
        for &b in &self.block_of {
            if b >= self.n_blocks {
                return Err(Error::NotACoarsening {
                    level: k,
                    reason: format!("block id {b} out of range"),
                });
            }
            used[b] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(Error::NotACoarsening {
                level: k,
                reason: "block ids are not contiguous".into(),
            });
        }
        Ok(())
    }

    /// Whether every block lies inside the children of a single level-`k-1` node,
    /// i.e. `F_{k-1} ⊆ G`.
    pub fn refines_previous(&self, tree: &Tree) -> bool {
        if self.level == 0 {
            return true;
        }
        let mut owner = vec![usize::MAX; self.n_blocks];
        for (v, &b) in self.block_of.iter().enumerate() {
            let p = tree.parent(self.level, v);
            if owner[b] == usize::MAX {
                owner[b] = p;
            } else if owner[b] != p {
                return false;
            }
        }
        true
    }

    /// Whether `x` is constant on every block, up to `tol`.
    pub fn is_measurable(&self, x: &[f64], tol: f64) -> bool {
        let mut first = vec![f64::NAN; self.n_blocks];
        for (v, &b) in self.block_of.iter().enumerate() {
            if first[b].is_nan() {
                first[b] = x[v];
            } else if (first[b] - x[v]).abs() > tol {
                return false;
            }
        }
        true
    }
}
